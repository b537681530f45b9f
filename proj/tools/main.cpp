#include <exception>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "commands.hpp"

using nlohmann::json;

namespace {

// Values from --config take precedence over command-line flags.
json finalize(json cfg, const std::string& config_path) {
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw std::runtime_error("cannot open config file " + config_path);
    cfg.merge_patch(json::parse(in));
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"feddet: federated object detection simulator"};
  app.require_subcommand(1);
  app.fallthrough();  // global options may appear after the subcommand

  json cfg = feddet::cli::default_config();
  std::string config_path;
  app.add_option("--config", config_path,
                 "JSON config file; its values override command-line flags")
      ->envname("FEDDET_CONFIG");

  std::string out = cfg["out"];
  int threads = cfg["threads"];
  app.add_option("--threads", threads, "worker threads for training and evaluation");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic multi-domain benchmark");
  std::string data_dir = cfg["data"]["dir"];
  std::uint64_t data_seed = cfg["data"]["seed"];
  int server_train = cfg["data"]["server_train"], server_test = cfg["data"]["server_test"];
  int client_train = cfg["data"]["client_train"], client_test = cfg["data"]["client_test"];
  int num_clients = cfg["data"]["num_clients"];
  gen->add_option("--out", data_dir, "dataset directory");
  gen->add_option("--seed", data_seed, "dataset seed");
  gen->add_option("--server-train", server_train, "server training scenes");
  gen->add_option("--server-test", server_test, "server test scenes");
  gen->add_option("--client-train", client_train, "training scenes per client");
  gen->add_option("--client-test", client_test, "test scenes per client");
  gen->add_option("--clients", num_clients, "number of clients");

  // train-base
  auto* tb = app.add_subcommand("train-base", "train the base model on the server split");
  std::uint64_t base_seed = cfg["base"]["seed"];
  int base_epochs = cfg["base"]["epochs"];
  double base_lr = cfg["base"]["lr"];
  int base_batch = cfg["base"]["batch_size"];
  bool base_resume = false;
  tb->add_option("--data", data_dir, "dataset directory");
  tb->add_option("--out", out, "output directory");
  tb->add_option("--seed", base_seed, "training seed");
  tb->add_option("--epochs", base_epochs, "training epochs");
  tb->add_option("--lr", base_lr, "learning rate");
  tb->add_option("--batch", base_batch, "minibatch size");
  tb->add_flag("--resume", base_resume, "continue from the latest epoch checkpoint");

  // fed-run
  auto* fr = app.add_subcommand("fed-run", "run federated rounds from a base checkpoint");
  std::string base_ckpt;
  int rounds = cfg["federation"]["rounds"];
  std::uint64_t master_seed = cfg["federation"]["master_seed"];
  std::string aggregator = cfg["federation"]["aggregator"];
  double client_fraction = cfg["federation"]["client_fraction"];
  bool fed_resume = false, no_eval = false;
  int client_epochs = cfg["client_train"]["epochs"];
  double client_lr = cfg["client_train"]["lr"];
  int distill_epochs = cfg["distill"]["epochs"];
  double distill_lr = cfg["distill"]["lr"];
  double lambda_fea = cfg["distill"]["lambda_fea"], lambda_cls = cfg["distill"]["lambda_cls"],
         lambda_reg = cfg["distill"]["lambda_reg"];
  double temperature = cfg["distill"]["temperature"];
  fr->add_option("--data", data_dir, "dataset directory");
  fr->add_option("--base", base_ckpt, "base model checkpoint");
  fr->add_option("--out", out, "output directory");
  fr->add_option("--rounds", rounds, "federated rounds");
  fr->add_option("--master-seed", master_seed, "master seed");
  fr->add_option("--aggregator", aggregator, "distill | fedavg");
  fr->add_option("--client-fraction", client_fraction, "fraction of clients per round");
  fr->add_option("--client-epochs", client_epochs, "client fine-tuning epochs");
  fr->add_option("--client-lr", client_lr, "client learning rate");
  fr->add_option("--distill-epochs", distill_epochs, "server distillation epochs");
  fr->add_option("--distill-lr", distill_lr, "server distillation learning rate");
  fr->add_option("--lambda-fea", lambda_fea, "feature distillation weight");
  fr->add_option("--lambda-cls", lambda_cls, "classification distillation weight");
  fr->add_option("--lambda-reg", lambda_reg, "regression distillation weight");
  fr->add_option("--temperature", temperature, "attention-map temperature");
  fr->add_flag("--resume", fed_resume, "continue from the latest round checkpoint");
  fr->add_flag("--no-eval", no_eval, "skip per-round indicator evaluation");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "indicator table for a finished run");
  std::string run_dir;
  std::vector<double> alphas = cfg["eval"]["alphas"].get<std::vector<double>>();
  ev->add_option("--data", data_dir, "dataset directory");
  ev->add_option("--run", run_dir, "fed-run output directory");
  ev->add_option("--out", out, "output directory");
  ev->add_option("--alphas", alphas, "A_com trade-off values");

  // fuse-compare
  auto* fc = app.add_subcommand("fuse-compare",
                                "compare NMS / Soft-NMS / NWM / WBF on the final ensembles");
  fc->add_option("--data", data_dir, "dataset directory");
  fc->add_option("--run", run_dir, "fed-run output directory");
  fc->add_option("--out", out, "output directory");

  // fuse
  auto* fu = app.add_subcommand("fuse", "fuse a detection file offline");
  std::string fuse_in, fuse_out, fuse_method = cfg["fuse"]["method"];
  double wbf_iou = cfg["fusion"]["wbf_iou"], nms_iou = cfg["fusion"]["nms_iou"];
  double soft_sigma = cfg["fusion"]["soft_sigma"], soft_floor = cfg["fusion"]["soft_floor"];
  int fuse_models = cfg["fusion"]["num_models"];
  fu->add_option("--input", fuse_in, "detection records file")->required();
  fu->add_option("--output", fuse_out, "output file")->required();
  fu->add_option("--method", fuse_method, "nms | soft-nms | nwm | wbf");
  fu->add_option("--iou", nms_iou, "IoU threshold for nms/nwm");
  fu->add_option("--wbf-iou", wbf_iou, "IoU threshold for wbf clustering");
  fu->add_option("--sigma", soft_sigma, "soft-nms decay");
  fu->add_option("--floor", soft_floor, "soft-nms score floor");
  fu->add_option("--models", fuse_models, "number of ensembled models (M)");

  CLI11_PARSE(app, argc, argv);

  cfg["out"] = out;
  cfg["threads"] = threads;
  cfg["data"] = {{"dir", data_dir},          {"seed", data_seed},
                 {"server_train", server_train}, {"server_test", server_test},
                 {"client_train", client_train}, {"client_test", client_test},
                 {"num_clients", num_clients}};
  cfg["base"] = {{"epochs", base_epochs}, {"lr", base_lr},       {"batch_size", base_batch},
                 {"seed", base_seed},     {"resume", base_resume}};
  cfg["client_train"]["epochs"] = client_epochs;
  cfg["client_train"]["lr"] = client_lr;
  cfg["distill"]["epochs"] = distill_epochs;
  cfg["distill"]["lr"] = distill_lr;
  cfg["distill"]["lambda_fea"] = lambda_fea;
  cfg["distill"]["lambda_cls"] = lambda_cls;
  cfg["distill"]["lambda_reg"] = lambda_reg;
  cfg["distill"]["temperature"] = temperature;
  cfg["federation"] = {{"rounds", rounds},
                       {"master_seed", master_seed},
                       {"aggregator", aggregator},
                       {"client_fraction", client_fraction},
                       {"eval_each_round", !no_eval},
                       {"resume", fed_resume}};
  cfg["eval"]["alphas"] = alphas;
  cfg["run_dir"] = run_dir;
  cfg["base_ckpt"] = base_ckpt;
  cfg["fuse"] = {{"input", fuse_in}, {"output", fuse_out}, {"method", fuse_method}};
  cfg["fusion"] = {{"wbf_iou", wbf_iou},
                   {"num_models", fuse_models},
                   {"nms_iou", nms_iou},
                   {"soft_sigma", soft_sigma},
                   {"soft_floor", soft_floor}};

  try {
    cfg = finalize(cfg, config_path);
    if (gen->parsed()) return feddet::cli::cmd_gen_data(cfg);
    if (tb->parsed()) return feddet::cli::cmd_train_base(cfg);
    if (fr->parsed()) return feddet::cli::cmd_fed_run(cfg);
    if (ev->parsed()) return feddet::cli::cmd_evaluate(cfg);
    if (fc->parsed()) return feddet::cli::cmd_fuse_compare(cfg);
    if (fu->parsed()) return feddet::cli::cmd_fuse(cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "error: no subcommand\n";
  return 1;
}

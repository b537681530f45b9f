#pragma once

#include <json.hpp>

namespace feddet::cli {

// Full default configuration tree. Command-line flags patch individual
// fields; a --config file is merge-patched on top of the flags afterwards.
nlohmann::json default_config();

int cmd_gen_data(const nlohmann::json& cfg);
int cmd_train_base(const nlohmann::json& cfg);
int cmd_fed_run(const nlohmann::json& cfg);
int cmd_evaluate(const nlohmann::json& cfg);
int cmd_fuse_compare(const nlohmann::json& cfg);
int cmd_fuse(const nlohmann::json& cfg);

}  // namespace feddet::cli

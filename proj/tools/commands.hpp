#pragma once

#include "run_config.hpp"

namespace sinsemi::cli {

void cmd_fixture(const RunConfig& cfg);
void cmd_train(const RunConfig& cfg);
void cmd_sample(const RunConfig& cfg);
void cmd_eval(const RunConfig& cfg);
void cmd_segtrain(const RunConfig& cfg);
void cmd_segeval(const RunConfig& cfg);
void cmd_ablate(const RunConfig& cfg);

}  // namespace sinsemi::cli

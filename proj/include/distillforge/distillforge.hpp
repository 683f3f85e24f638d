#pragma once

// Umbrella header; individual modules can also be included on their own.

#include "distillforge/common.hpp"
#include "distillforge/tensor.hpp"
#include "distillforge/ops.hpp"
#include "distillforge/losses.hpp"
#include "distillforge/grad_check.hpp"
#include "distillforge/tokenizer.hpp"
#include "distillforge/corpus.hpp"
#include "distillforge/encoder.hpp"
#include "distillforge/checkpoint.hpp"
#include "distillforge/optimizer.hpp"
#include "distillforge/masking.hpp"
#include "distillforge/distill.hpp"
#include "distillforge/eval.hpp"
#include "distillforge/finetune.hpp"
#include "distillforge/run_config.hpp"
#include "distillforge/cli.hpp"

#pragma once

#include "sdream/adain_dream.hpp"
#include "sdream/config.hpp"
#include "sdream/error.hpp"
#include "sdream/eval_harness.hpp"
#include "sdream/model.hpp"
#include "sdream/ops.hpp"
#include "sdream/rng.hpp"
#include "sdream/runtime.hpp"
#include "sdream/synth_data.hpp"
#include "sdream/tensor.hpp"
#include "sdream/training.hpp"

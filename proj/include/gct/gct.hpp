#pragma once

#include "gct/checkpoint.hpp"
#include "gct/config.hpp"
#include "gct/data.hpp"
#include "gct/decode.hpp"
#include "gct/error.hpp"
#include "gct/gradcheck.hpp"
#include "gct/log_mel.hpp"
#include "gct/loss.hpp"
#include "gct/metrics.hpp"
#include "gct/model.hpp"
#include "gct/ops.hpp"
#include "gct/optim.hpp"
#include "gct/patches.hpp"
#include "gct/synth.hpp"
#include "gct/tensor.hpp"
#include "gct/train.hpp"
#include "gct/wav.hpp"

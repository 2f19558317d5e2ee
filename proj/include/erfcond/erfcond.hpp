#pragma once

#include "erfcond/tensor.hpp"
#include "erfcond/ops.hpp"
#include "erfcond/nn.hpp"
#include "erfcond/blocks.hpp"
#include "erfcond/backbone.hpp"
#include "erfcond/condlane.hpp"
#include "erfcond/losses.hpp"
#include "erfcond/optim.hpp"
#include "erfcond/checkpoint.hpp"
#include "erfcond/datasets.hpp"
#include "erfcond/metrics.hpp"
#include "erfcond/training.hpp"
#include "erfcond/harness.hpp"

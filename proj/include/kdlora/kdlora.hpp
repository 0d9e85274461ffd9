#pragma once

// Umbrella header for the whole library.

#include "kdlora/accounting.hpp"
#include "kdlora/checkpoint.hpp"
#include "kdlora/common.hpp"
#include "kdlora/data.hpp"
#include "kdlora/lora.hpp"
#include "kdlora/losses.hpp"
#include "kdlora/manifest.hpp"
#include "kdlora/metrics.hpp"
#include "kdlora/model.hpp"
#include "kdlora/optim.hpp"
#include "kdlora/report.hpp"
#include "kdlora/rng.hpp"
#include "kdlora/sweep.hpp"
#include "kdlora/tensor.hpp"
#include "kdlora/train.hpp"

// Umbrella header.
#pragma once

#include "grassmann/bench.hpp"
#include "grassmann/checkpoint.hpp"
#include "grassmann/checks.hpp"
#include "grassmann/corpus.hpp"
#include "grassmann/geometry.hpp"
#include "grassmann/gradcheck.hpp"
#include "grassmann/mixing.hpp"
#include "grassmann/model.hpp"
#include "grassmann/ops.hpp"
#include "grassmann/optim.hpp"
#include "grassmann/tensor.hpp"
#include "grassmann/trainer.hpp"

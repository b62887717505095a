#pragma once

#include "eagle/adam.hpp"
#include "eagle/checkpoint.hpp"
#include "eagle/ea_dgnn.hpp"
#include "eagle/ecvae.hpp"
#include "eagle/errors.hpp"
#include "eagle/experiment.hpp"
#include "eagle/graph.hpp"
#include "eagle/invariant.hpp"
#include "eagle/metrics.hpp"
#include "eagle/rng.hpp"
#include "eagle/tensor.hpp"
#include "eagle/train.hpp"

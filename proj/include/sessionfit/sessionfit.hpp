#pragma once

// Umbrella header for the sessionfit incremental-learning engine.

#include "sessionfit/checkpoint.hpp"
#include "sessionfit/config.hpp"
#include "sessionfit/data.hpp"
#include "sessionfit/detmath.hpp"
#include "sessionfit/experiment.hpp"
#include "sessionfit/network.hpp"
#include "sessionfit/optim.hpp"
#include "sessionfit/prng.hpp"
#include "sessionfit/tensor.hpp"

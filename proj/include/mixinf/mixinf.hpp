#pragma once

#include "mixinf/errors.hpp"
#include "mixinf/numerics.hpp"
#include "mixinf/distributions.hpp"
#include "mixinf/lmm.hpp"
#include "mixinf/estimation.hpp"
#include "mixinf/prediction.hpp"
#include "mixinf/covariance.hpp"
#include "mixinf/inference.hpp"
#include "mixinf/simulation.hpp"

#pragma once

#include "fbsde_bml/adam.hpp"
#include "fbsde_bml/autodiff.hpp"
#include "fbsde_bml/errors.hpp"
#include "fbsde_bml/network.hpp"
#include "fbsde_bml/problems.hpp"
#include "fbsde_bml/random.hpp"
#include "fbsde_bml/rollout.hpp"
#include "fbsde_bml/timegrid.hpp"
#include "fbsde_bml/trainer.hpp"

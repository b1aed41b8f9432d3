#pragma once

#include "branchflow/adam.hpp"
#include "branchflow/autodiff.hpp"
#include "branchflow/deqgan.hpp"
#include "branchflow/dynamics.hpp"
#include "branchflow/error.hpp"
#include "branchflow/experiment.hpp"
#include "branchflow/model.hpp"
#include "branchflow/potential.hpp"
#include "branchflow/rng.hpp"
#include "branchflow/svg.hpp"
#include "branchflow/training.hpp"

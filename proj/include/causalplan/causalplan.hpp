#pragma once

#include "causalplan/core.hpp"
#include "causalplan/kitchen_sim.hpp"
#include "causalplan/feature_schema.hpp"
#include "causalplan/behavior_policies.hpp"
#include "causalplan/trajectory_store.hpp"
#include "causalplan/sca_model.hpp"
#include "causalplan/causal_matrix.hpp"
#include "causalplan/causal_planner.hpp"
#include "causalplan/proposers.hpp"
#include "causalplan/oracle_ridge.hpp"
#include "causalplan/harness.hpp"

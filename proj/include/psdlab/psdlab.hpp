#pragma once

#include "psdlab/adam.hpp"
#include "psdlab/diagnostics.hpp"
#include "psdlab/distill.hpp"
#include "psdlab/errors.hpp"
#include "psdlab/guidance.hpp"
#include "psdlab/oracle.hpp"
#include "psdlab/representation.hpp"
#include "psdlab/rewards.hpp"
#include "psdlab/rng.hpp"
#include "psdlab/schedule.hpp"
#include "psdlab/score_model.hpp"
#include "psdlab/tasks.hpp"
#include "psdlab/types.hpp"

#pragma once

// Umbrella header: the neural local smoother, its kernel-smoother baseline,
// interpretation tooling and the experiment harness.

#include "nls/adam.hpp"
#include "nls/autodiff.hpp"
#include "nls/dataset.hpp"
#include "nls/errors.hpp"
#include "nls/experiment.hpp"
#include "nls/interpret.hpp"
#include "nls/lls.hpp"
#include "nls/matrix.hpp"
#include "nls/metrics.hpp"
#include "nls/model.hpp"
#include "nls/network.hpp"
#include "nls/rng.hpp"
#include "nls/serialize.hpp"

#pragma once

// Umbrella header for the whole library.

#include "kelixpq/error.hpp"
#include "kelixpq/rng.hpp"
#include "kelixpq/binary_io.hpp"
#include "kelixpq/ndiff.hpp"
#include "kelixpq/codebook.hpp"
#include "kelixpq/pq.hpp"
#include "kelixpq/quantalt.hpp"
#include "kelixpq/nbp.hpp"
#include "kelixpq/synth.hpp"
#include "kelixpq/toymodel.hpp"
#include "kelixpq/ablation.hpp"

#pragma once

#include "attrvr/core.hpp"
#include "attrvr/reprogram.hpp"
#include "attrvr/encoders.hpp"
#include "attrvr/attributes.hpp"
#include "attrvr/scoring.hpp"
#include "attrvr/training.hpp"
#include "attrvr/separability.hpp"
#include "attrvr/config.hpp"
#include "attrvr/harness.hpp"

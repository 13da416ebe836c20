#pragma once

#include "gaptide/random.hpp"
#include "gaptide/event_data.hpp"
#include "gaptide/riskset.hpp"
#include "gaptide/model_core.hpp"
#include "gaptide/sampler.hpp"
#include "gaptide/em.hpp"
#include "gaptide/diagnostics.hpp"
#include "gaptide/simlab.hpp"

namespace gaptide {
inline constexpr const char* kVersion = "0.1.0";
}

#pragma once

// Umbrella header: attention-aware post-training quantization of toy
// transformer blocks with Hessian-trace-driven mixed 2/4-bit allocation.

#include "aptq/attention.hpp"
#include "aptq/errors.hpp"
#include "aptq/gradients.hpp"
#include "aptq/hessian.hpp"
#include "aptq/matrix.hpp"
#include "aptq/model_io.hpp"
#include "aptq/pipeline.hpp"
#include "aptq/planner.hpp"
#include "aptq/quantizer.hpp"
#include "aptq/rng.hpp"

#pragma once

#include "flowsuff/flow/flow_model.hpp"
#include "flowsuff/numcore/rng.hpp"

namespace flowsuff::testing {

/// Push every trainable tensor away from its identity initialization.
inline void randomize(FlowModel& m, RngStream& rng, double scale = 0.5) {
    for (auto* p : m.parameters()) {
        p->value = rng.normal_matrix(p->value.rows(), p->value.cols()) * scale;
    }
    for (auto& b : m.blocks()) b.actnorm.initialized = true;
}

inline FlowConfig small_config(int width = 16) {
    FlowConfig cfg;
    cfg.hidden_width = width;
    return cfg;
}

}  // namespace flowsuff::testing

#pragma once

#include "uvx/segnet.hpp"

#include <string>
#include <vector>

namespace uvx {

/// levels=2, C=4, Z=8, L=2, 16x16 input, 3 classes.
ModelConfig tiny_model_config();

struct GradcheckOptions {
    ModelConfig model = tiny_model_config();
    double tolerance = 1e-4;
    double step = 1e-4;
    std::size_t min_coords = 200;  ///< coordinates sampled per tensor (all when fewer)
    std::uint64_t seed = 0;
    std::string corrupt_op;        ///< fault injection: scale this op's backward rule
    double corrupt_factor = 1.5;
    /// Redraw weights uniformly with variance 1/fan_in and jitter 1-D
    /// parameters by U(-0.2, 0.2) before checking.
    bool rescale = true;
    std::vector<double> sweep_steps{1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8};
};

struct ParamCheck {
    std::string id;
    std::size_t checked = 0;
    std::size_t skipped = 0; ///< coordinates whose +-h evaluations straddle a kink
    double max_rel_err = 0.0;
    double max_abs_grad = 0.0; ///< over checked coordinates
    bool pass = true;
};

struct StepSweepRow {
    double step = 0.0;
    double median_rel_err = 0.0;
    double max_rel_err = 0.0;
};

struct GradcheckReport {
    std::vector<ParamCheck> params;
    std::vector<StepSweepRow> sweep;

    bool pass() const;
    std::vector<std::string> offenders() const;
    /// "param,checked,skipped,max_rel_err,max_abs_grad,pass"
    std::string to_csv() const;
    /// "step,median_rel_err,max_rel_err"
    std::string sweep_csv() const;
};

/// Relative error |a - n| / max(|a|, |n|); absolute |a - n| when both are below 1e-6.
double gradient_error(double analytic, double numeric);

/// Central-difference check of every parameter of the tiny model in double
/// precision on the composite loss of a random image and label map.
GradcheckReport run_gradcheck(const GradcheckOptions& opts = {});

} // namespace uvx

#pragma once

#include "uvx/data.hpp"
#include "uvx/metrics.hpp"
#include "uvx/segnet.hpp"

#include <functional>
#include <map>
#include <optional>
#include <string>

namespace uvx {

/// Plain-text key=value run configuration; `#` starts a comment.
struct RunConfig {
    ModelConfig model;
    double lr = 1e-4;
    double weight_decay = 1e-5;
    std::size_t iters = 300;
    std::size_t batch_size = 4;
    std::size_t checkpoint_every = 100;
    double mu = 1e-5;
    std::uint64_t seed = 0;
    bool augment = true;
    std::string train_manifest; ///< required for training
    std::string test_manifest;
    std::string out_dir = "run";

    /// Serializes every key; parse_run_config(to_text()) round-trips.
    std::string to_text() const;
};

/// ConfigError on unknown keys, malformed values or lines without '='.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

struct TrainOptions {
    std::string resume;                 ///< checkpoint to continue from
    std::function<void(const std::string&)> log; ///< progress lines; may be empty
};

struct TrainResult {
    std::vector<double> losses; ///< loss of each iteration run in this call
    std::string final_checkpoint;
};

/// Training loop: batch -> augment -> forward -> composite loss -> backward ->
/// AdamW step. Writes out_dir/{run.cfg, loss.csv, ckpt_XXXXXX.uvxw,
/// final.uvxw}. NumericError (with the iteration) on a non-finite loss; the
/// checkpoints already written are left untouched.
TrainResult train(const RunConfig& cfg, const TrainOptions& opts = {});

/// Checkpoint written after `iteration` steps.
std::string checkpoint_path(const RunConfig& cfg, std::size_t iteration);

/// Argmax prediction of one sample.
template <class T>
LabelMap predict(const UVixLSTM<T>& model, const data::Sample& s);

/// Per-case metrics of `model` (or of the ground truth itself when model is null).
MetricReport evaluate(const UVixLSTM<float>* model, const std::vector<data::Sample>& samples,
                      std::size_t num_classes);

struct EvalOptions {
    std::string checkpoint;
    std::string manifest;
    std::string config;   ///< defaults to run.cfg beside the checkpoint
    std::string out_dir;  ///< defaults to the checkpoint's directory
    bool oracle = false;  ///< score ground truth against itself
};

/// Writes metrics.csv and dotplot.csv; returns the report.
MetricReport run_eval(const EvalOptions& opts);

} // namespace uvx

#include "uvx/bench.hpp"
#include "uvx/errors.hpp"
#include "uvx/gradcheck.hpp"
#include "uvx/train.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;

namespace {

enum Exit : int { kOk = 0, kNumeric = 1, kConfig = 2, kIo = 3 };

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw uvx::FormatError("cannot write " + path.string());
    out << text;
}

uvx::Shape parse_size(const std::string& text) {
    uvx::Shape s;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, 'x')) {
        try {
            std::size_t used = 0;
            const unsigned long v = std::stoul(part, &used);
            if (used != part.size() || v == 0) throw std::invalid_argument(part);
            s.push_back(v);
        } catch (const std::logic_error&) {
            throw uvx::ConfigError("bad size '" + text + "': expected HxW or HxWxD");
        }
    }
    if (s.size() != 2 && s.size() != 3) throw uvx::ConfigError("bad size '" + text + "': expected HxW or HxWxD");
    return s;
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) {
        try {
            out.push_back(std::stoul(part));
        } catch (const std::logic_error&) {
            throw uvx::ConfigError("bad --sizes entry '" + part + "'");
        }
    }
    return out;
}

int cmd_train(const std::string& config, const std::string& resume, bool quiet) {
    uvx::RunConfig cfg = uvx::load_run_config(config);
    uvx::TrainOptions opts;
    opts.resume = resume;
    if (!quiet) opts.log = [](const std::string& line) { std::cerr << line << '\n'; };
    const uvx::TrainResult res = uvx::train(cfg, opts);
    std::cout << "final checkpoint: " << res.final_checkpoint << '\n';
    return kOk;
}

int cmd_eval(const uvx::EvalOptions& opts) {
    const uvx::MetricReport rep = uvx::run_eval(opts);
    std::cout << "mean_dsc=" << rep.mean_dsc() << " mean_iou=" << rep.mean_iou() << " mean_hd95=" << rep.mean_hd95()
              << " undefined_hd95=" << rep.undefined_hd95_count() << '\n';
    return kOk;
}

int cmd_gradcheck(double tolerance, std::uint64_t seed, const std::string& corrupt, const std::string& out) {
    uvx::GradcheckOptions opts;
    opts.tolerance = tolerance;
    opts.seed = seed;
    opts.corrupt_op = corrupt;
    const uvx::GradcheckReport rep = uvx::run_gradcheck(opts);
    write_file(fs::path(out) / "gradcheck.csv", rep.to_csv());
    write_file(fs::path(out) / "step_sweep.csv", rep.sweep_csv());
    std::cout << rep.to_csv();
    if (rep.pass()) return kOk;
    std::cerr << "gradient check failed for:";
    for (const auto& id : rep.offenders()) std::cerr << ' ' << id;
    std::cerr << '\n';
    return kNumeric;
}

int cmd_bench(const uvx::BenchOptions& opts, const std::string& out) {
    const uvx::BenchReport rep = uvx::run_bench(opts);
    write_file(fs::path(out) / "bench.csv", rep.to_csv());
    write_file(fs::path(out) / "bench_fit.csv", rep.fits_csv());
    std::cout << rep.to_csv() << rep.fits_csv();
    return kOk;
}

int cmd_synth(uvx::data::SynthConfig cfg, const std::string& size, const std::string& out, double split) {
    cfg.extents = parse_size(size);
    const uvx::data::Manifest all = uvx::data::synth_dataset(cfg, out);
    if (split > 0.0) {
        auto [train, test] = uvx::data::split_train_test(all, split, cfg.seed);
        uvx::data::write_manifest((fs::path(out) / "train.csv").string(), train);
        uvx::data::write_manifest((fs::path(out) / "test.csv").string(), test);
    }
    std::cout << all.entries.size() << " cases written to " << out << '\n';
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"U-VixLSTM segmentation toolkit"};
    app.require_subcommand(1);

    std::string config, resume;
    bool quiet = false;
    auto* train = app.add_subcommand("train", "train a model from a key=value config");
    train->add_option("--config", config, "run configuration")->required();
    train->add_option("--resume", resume, "checkpoint to continue from");
    train->add_flag("--quiet", quiet, "suppress progress lines");

    uvx::EvalOptions eval_opts;
    auto* eval = app.add_subcommand("eval", "score a checkpoint on a manifest");
    eval->add_option("--checkpoint", eval_opts.checkpoint)->required();
    eval->add_option("--manifest", eval_opts.manifest)->required();
    eval->add_option("--config", eval_opts.config, "defaults to run.cfg beside the checkpoint");
    eval->add_option("--out", eval_opts.out_dir, "defaults to the checkpoint's directory");
    eval->add_flag("--oracle", eval_opts.oracle, "score the ground truth against itself");

    double tolerance = 1e-4;
    std::uint64_t gc_seed = 0;
    std::string corrupt, gc_out = ".";
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the tiny model");
    gradcheck->add_option("--tolerance", tolerance)->capture_default_str();
    gradcheck->add_option("--seed", gc_seed)->capture_default_str();
    gradcheck->add_option("--corrupt-op", corrupt, "scale this op's backward rule (fault injection)");
    gradcheck->add_option("--out", gc_out, "directory for gradcheck.csv and step_sweep.csv")->capture_default_str();

    uvx::BenchOptions bench_opts;
    std::string sizes, bench_out = ".";
    auto* bench = app.add_subcommand("bench", "mLSTM versus softmax attention scaling");
    bench->add_option("--sizes", sizes, "comma-separated token counts");
    bench->add_option("--repeats", bench_opts.repeats)->capture_default_str();
    bench->add_option("--embed-dim", bench_opts.embed_dim)->capture_default_str();
    bench->add_option("--heads", bench_opts.heads)->capture_default_str();
    bench->add_option("--out", bench_out, "directory for bench.csv and bench_fit.csv")->capture_default_str();

    uvx::data::SynthConfig synth_cfg;
    std::string size = "64x64", synth_out;
    double split = 0.0;
    auto* synth = app.add_subcommand("synth", "write a synthetic segmentation dataset");
    synth->add_option("--cases", synth_cfg.cases)->capture_default_str();
    synth->add_option("--size", size, "HxW or HxWxD")->capture_default_str();
    synth->add_option("--classes", synth_cfg.num_classes)->capture_default_str();
    synth->add_option("--seed", synth_cfg.seed)->capture_default_str();
    synth->add_option("--out", synth_out)->required();
    synth->add_option("--split", split, "also write train.csv/test.csv with this train fraction");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        if (*train) return cmd_train(config, resume, quiet);
        if (*eval) return cmd_eval(eval_opts);
        if (*gradcheck) return cmd_gradcheck(tolerance, gc_seed, corrupt, gc_out);
        if (*bench) {
            if (!sizes.empty()) bench_opts.sizes = parse_sizes(sizes);
            return cmd_bench(bench_opts, bench_out);
        }
        if (*synth) return cmd_synth(synth_cfg, size, synth_out, split);
    } catch (const uvx::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kNumeric;
    } catch (const uvx::FormatError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kIo;
    } catch (const uvx::Error& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kIo;
    }
    return kConfig;
}

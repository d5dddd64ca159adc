#include "uvx/train.hpp"

#include "uvx/binary_io.hpp"
#include "uvx/checkpoint.hpp"
#include "uvx/errors.hpp"
#include "uvx/losses.hpp"
#include "uvx/optim.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace uvx {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

template <class U>
U parse_number(const std::string& key, const std::string& v) {
    U out{};
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
        throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

Shape parse_extents(const std::string& key, const std::string& v) {
    Shape s;
    std::stringstream ss(v);
    std::string part;
    while (std::getline(ss, part, 'x')) s.push_back(parse_number<std::size_t>(key, part));
    if (s.empty()) throw ConfigError("config key '" + key + "': empty extents");
    return s;
}

std::string extents_text(const Shape& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
    return out;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw FormatError("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw FormatError("write failed for '" + path + "'");
}

std::string read_text(const std::string& path) {
    const auto bytes = io::read_file(path);
    return std::string(bytes.begin(), bytes.end());
}

// Rows of an existing loss CSV up to and including `last_iter`.
std::string loss_rows_until(const std::string& path, std::size_t last_iter) {
    std::string out = "iter,loss\n";
    if (!fs::exists(path)) return out;
    std::istringstream in(read_text(path));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        const auto comma = line.find(',');
        if (comma == std::string::npos) continue;
        if (parse_number<std::size_t>("iter", line.substr(0, comma)) <= last_iter) out += line + '\n';
    }
    return out;
}

} // namespace

std::string RunConfig::to_text() const {
    std::ostringstream os;
    const auto& m = model;
    os << "spatial_rank=" << m.spatial_rank << '\n'
       << "extents=" << extents_text(m.input_extents) << '\n'
       << "levels=" << m.levels << '\n'
       << "base_channels=" << m.base_channels << '\n'
       << "patch_size=" << m.patch_size << '\n'
       << "embed_dim=" << m.embed_dim << '\n'
       << "vil_blocks=" << m.vil_blocks << '\n'
       << "heads=" << m.heads << '\n'
       << "num_classes=" << m.num_classes << '\n'
       << "residual_vil=" << (m.residual_vil ? "true" : "false") << '\n'
       << "gate_silu=" << (m.gate_silu ? "true" : "false") << '\n'
       << "forget_gate=" << (m.forget_gate == vil::ForgetGate::Exp ? "exp" : "sigmoid") << '\n'
       << "downsample=" << (m.downsample == Downsample::StrideConv ? "stride_conv" : "max_pool") << '\n'
       << "conv_init=" << (m.conv_init == ConvInit::He ? "he" : "normal") << '\n'
       << "lr=" << fmt(lr) << '\n'
       << "weight_decay=" << fmt(weight_decay) << '\n'
       << "iters=" << iters << '\n'
       << "batch_size=" << batch_size << '\n'
       << "checkpoint_every=" << checkpoint_every << '\n'
       << "mu=" << fmt(mu) << '\n'
       << "seed=" << seed << '\n'
       << "augment=" << (augment ? "true" : "false") << '\n'
       << "train_manifest=" << train_manifest << '\n'
       << "test_manifest=" << test_manifest << '\n'
       << "out_dir=" << out_dir << '\n';
    return os.str();
}

RunConfig parse_run_config(const std::string& text) {
    RunConfig c;
    std::istringstream in(text);
    std::string raw;
    std::size_t lineno = 0;
    bool rank_set = false, extents_set = false;
    while (std::getline(in, raw)) {
        ++lineno;
        const auto hash = raw.find('#');
        const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": missing '='");
        const std::string k = trim(line.substr(0, eq));
        const std::string v = trim(line.substr(eq + 1));
        auto& m = c.model;
        if (k == "spatial_rank") m.spatial_rank = parse_number<std::size_t>(k, v), rank_set = true;
        else if (k == "extents") m.input_extents = parse_extents(k, v), extents_set = true;
        else if (k == "levels") m.levels = parse_number<std::size_t>(k, v);
        else if (k == "base_channels") m.base_channels = parse_number<std::size_t>(k, v);
        else if (k == "patch_size") m.patch_size = parse_number<std::size_t>(k, v);
        else if (k == "embed_dim") m.embed_dim = parse_number<std::size_t>(k, v);
        else if (k == "vil_blocks") m.vil_blocks = parse_number<std::size_t>(k, v);
        else if (k == "heads") m.heads = parse_number<std::size_t>(k, v);
        else if (k == "num_classes") m.num_classes = parse_number<std::size_t>(k, v);
        else if (k == "residual_vil") m.residual_vil = parse_bool(k, v);
        else if (k == "gate_silu") m.gate_silu = parse_bool(k, v);
        else if (k == "forget_gate") {
            if (v == "exp") m.forget_gate = vil::ForgetGate::Exp;
            else if (v == "sigmoid") m.forget_gate = vil::ForgetGate::Sigmoid;
            else throw ConfigError("config key 'forget_gate': expected exp or sigmoid");
        } else if (k == "downsample") {
            if (v == "stride_conv") m.downsample = Downsample::StrideConv;
            else if (v == "max_pool") m.downsample = Downsample::MaxPool;
            else throw ConfigError("config key 'downsample': expected stride_conv or max_pool");
        } else if (k == "conv_init") {
            if (v == "normal") m.conv_init = ConvInit::Normal002;
            else if (v == "he") m.conv_init = ConvInit::He;
            else throw ConfigError("config key 'conv_init': expected normal or he");
        }
        else if (k == "lr") c.lr = parse_number<double>(k, v);
        else if (k == "weight_decay") c.weight_decay = parse_number<double>(k, v);
        else if (k == "iters") c.iters = parse_number<std::size_t>(k, v);
        else if (k == "batch_size") c.batch_size = parse_number<std::size_t>(k, v);
        else if (k == "checkpoint_every") c.checkpoint_every = parse_number<std::size_t>(k, v);
        else if (k == "mu") c.mu = parse_number<double>(k, v);
        else if (k == "seed") c.seed = parse_number<std::uint64_t>(k, v);
        else if (k == "augment") c.augment = parse_bool(k, v);
        else if (k == "train_manifest") c.train_manifest = v;
        else if (k == "test_manifest") c.test_manifest = v;
        else if (k == "out_dir") c.out_dir = v;
        else throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + k + "'");
    }
    if (rank_set && !extents_set) c.model.input_extents.assign(c.model.spatial_rank, 64);
    if (!(c.lr > 0.0)) throw ConfigError("lr must be positive");
    if (c.weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (c.batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(c.mu >= 0.0)) throw ConfigError("mu must be non-negative");
    c.model.validate();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    RunConfig c = parse_run_config(read_text(path));
    // Manifest paths are relative to the config file.
    const fs::path dir = fs::path(path).parent_path();
    for (std::string* p : {&c.train_manifest, &c.test_manifest}) {
        if (!p->empty() && fs::path(*p).is_relative()) *p = (dir / *p).string();
    }
    return c;
}

std::string checkpoint_path(const RunConfig& cfg, std::size_t iteration) {
    char name[32];
    std::snprintf(name, sizeof name, "ckpt_%06zu.uvxw", iteration);
    return (fs::path(cfg.out_dir) / name).string();
}

TrainResult train(const RunConfig& cfg, const TrainOptions& opts) {
    if (cfg.train_manifest.empty()) throw ConfigError("train_manifest is required");
    cfg.model.validate();
    const data::Manifest manifest = data::read_manifest(cfg.train_manifest);
    const std::vector<data::Sample> samples = data::load_samples(manifest, cfg.model.num_classes);
    if (samples.empty()) throw ConfigError("training manifest is empty");
    for (const auto& s : samples) {
        if (s.mask.shape() != cfg.model.input_extents) {
            throw ShapeError(s.case_id + ": extents " + shape_str(s.mask.shape()) + " differ from configured " +
                             shape_str(cfg.model.input_extents));
        }
    }

    fs::create_directories(cfg.out_dir);
    write_text((fs::path(cfg.out_dir) / "run.cfg").string(), cfg.to_text());

    UVixLSTM<float> model(cfg.model, cfg.seed);
    AdamW<float> optim(model.parameters(), AdamWOptions{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    if (!opts.resume.empty()) restore(load_checkpoint(opts.resume), model.parameters(), &optim);
    const std::size_t start = optim.step_count();

    const std::string loss_path = (fs::path(cfg.out_dir) / "loss.csv").string();
    std::string loss_csv = loss_rows_until(loss_path, opts.resume.empty() ? 0 : start);
    write_text(loss_path, loss_csv);

    TrainResult result;
    if (start == 0) save_checkpoint(checkpoint_path(cfg, 0), snapshot(model.parameters(), &optim));

    data::AugmentConfig aug;
    if (!cfg.augment) {
        aug.flip_prob = 0.0;
        aug.rotate = false;
    }
    const std::size_t n = samples.size();
    const std::size_t batch = std::min(cfg.batch_size, n);
    const float inv_batch = 1.0f / static_cast<float>(batch);

    for (std::size_t it = start + 1; it <= cfg.iters; ++it) {
        // Cases without replacement, reproducible from (seed, iteration).
        CounterRng pick(cfg.seed, /*stream=*/0xB000000000ull + it);
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        for (std::size_t i = 0; i < batch; ++i) std::swap(order[i], order[i + pick() % (n - i)]);

        model.parameters().zero_grad();
        double batch_loss = 0.0;
        try {
            for (std::size_t j = 0; j < batch; ++j) {
                const std::uint64_t aug_seed = CounterRng::mix(cfg.seed ^ CounterRng::mix(it * 1000003ull + j));
                const data::Sample s = data::augment(samples[order[j]], aug, aug_seed);
                Var<float> pred = model.forward(Var<float>(s.image));
                Var<float> loss = composite_loss(pred, one_hot<float>(s.mask, cfg.model.num_classes),
                                                 static_cast<float>(cfg.mu));
                const float lv = loss.value().item();
                if (!std::isfinite(lv)) throw NumericError("non-finite loss for case " + s.case_id);
                batch_loss += static_cast<double>(lv);
                backward(scale(loss, inv_batch));
            }
            optim.step();
        } catch (const NumericError& e) {
            throw NumericError("iteration " + std::to_string(it) + ": " + e.what());
        }
        const double mean_loss = batch_loss / static_cast<double>(batch);
        result.losses.push_back(mean_loss);
        loss_csv += std::to_string(it) + ',' + fmt(mean_loss) + '\n';
        write_text(loss_path, loss_csv);
        if (opts.log) opts.log("iter " + std::to_string(it) + " loss " + fmt(mean_loss));
        if (cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0) {
            save_checkpoint(checkpoint_path(cfg, it), snapshot(model.parameters(), &optim));
        }
    }
    result.final_checkpoint = (fs::path(cfg.out_dir) / "final.uvxw").string();
    save_checkpoint(result.final_checkpoint, snapshot(model.parameters(), &optim));
    return result;
}

template <class T>
LabelMap predict(const UVixLSTM<T>& model, const data::Sample& s) {
    NoGradGuard ng;
    const Tensor<T> image = s.image.template cast<T>();
    return argmax_labels(model.logits(Var<T>(image)).value());
}

MetricReport evaluate(const UVixLSTM<float>* model, const std::vector<data::Sample>& samples,
                      std::size_t num_classes) {
    MetricReport report;
    for (const auto& s : samples) {
        const LabelMap pred = model ? predict(*model, s) : s.mask;
        const std::vector<double> spacing(s.mask.rank(), 1.0);
        report.cases.push_back(evaluate_case(s.case_id, pred, s.mask, num_classes, spacing));
    }
    return report;
}

MetricReport run_eval(const EvalOptions& opts) {
    const fs::path ckpt_dir = fs::path(opts.checkpoint).parent_path();
    const std::string cfg_path = opts.config.empty() ? (ckpt_dir / "run.cfg").string() : opts.config;
    const RunConfig cfg = parse_run_config(read_text(cfg_path));
    const data::Manifest manifest = data::read_manifest(opts.manifest);
    std::vector<data::Sample> samples;
    for (const auto& e : manifest.entries) {
        samples.push_back(data::load_sample(manifest, e));
        for (std::uint8_t g : samples.back().mask.data()) {
            if (g >= cfg.model.num_classes) {
                throw ConfigError(e.case_id + ": label " + std::to_string(g) + " but the model has " +
                                  std::to_string(cfg.model.num_classes) + " classes");
            }
        }
        data::validate_sample(samples.back(), cfg.model.num_classes);
    }
    UVixLSTM<float> model(cfg.model, cfg.seed);
    const Checkpoint ckpt = load_checkpoint(opts.checkpoint);
    for (const auto& e : ckpt.params) {
        if (e.id == "head.w" && e.shape.at(0) != cfg.model.num_classes) {
            throw ConfigError("checkpoint predicts " + std::to_string(e.shape[0]) + " classes, config expects " +
                              std::to_string(cfg.model.num_classes));
        }
    }
    restore(ckpt, model.parameters());
    const MetricReport report = evaluate(opts.oracle ? nullptr : &model, samples, cfg.model.num_classes);
    const fs::path out = opts.out_dir.empty() ? ckpt_dir : fs::path(opts.out_dir);
    if (!out.empty()) fs::create_directories(out);
    write_text((out / "metrics.csv").string(), report.to_csv());
    write_text((out / "dotplot.csv").string(), report.dot_plot_csv());
    return report;
}

template LabelMap predict<float>(const UVixLSTM<float>&, const data::Sample&);
template LabelMap predict<double>(const UVixLSTM<double>&, const data::Sample&);

} // namespace uvx

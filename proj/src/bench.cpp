#include "uvx/bench.hpp"

#include "uvx/errors.hpp"
#include "uvx/flops.hpp"
#include "uvx/rng.hpp"
#include "uvx/vil.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>

namespace uvx {

namespace {

std::string fmt(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

template <class T>
Tensor<T> matmul_plain(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    if (b.dim(0) != k) throw ShapeError("attention: inner dimensions " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor<T> out(Shape{n, m}, T{0});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            for (std::size_t j = 0; j < m; ++j) out[i * m + j] += av * b[p * m + j];
        }
    }
    flops::add(2ull * n * k * m);
    return out;
}

Tensor<float> random_tensor(const Shape& s, CounterRng& rng, double scale) {
    Tensor<float> t(s);
    for (float& v : t.data()) v = static_cast<float>((rng.uniform() * 2.0 - 1.0) * scale);
    return t;
}

// Median seconds per call of fn, batching calls until a repeat lasts min_seconds.
std::pair<double, std::size_t> time_call(const std::function<void()>& fn, std::size_t repeats, double min_seconds) {
    using clock = std::chrono::steady_clock;
    fn(); // warmup
    std::size_t inner = 1;
    for (;;) {
        const auto t0 = clock::now();
        for (std::size_t i = 0; i < inner; ++i) fn();
        const double dt = std::chrono::duration<double>(clock::now() - t0).count();
        if (dt >= min_seconds || inner >= (1u << 20)) break;
        inner *= 2;
    }
    std::vector<double> samples;
    for (std::size_t r = 0; r < repeats; ++r) {
        const auto t0 = clock::now();
        for (std::size_t i = 0; i < inner; ++i) fn();
        samples.push_back(std::chrono::duration<double>(clock::now() - t0).count() / double(inner));
    }
    std::sort(samples.begin(), samples.end());
    const std::size_t m = samples.size() / 2;
    const double med = samples.size() % 2 ? samples[m] : 0.5 * (samples[m - 1] + samples[m]);
    return {med, inner};
}

} // namespace

template <class T>
Tensor<T> attention_core(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V, T scale) {
    if (Q.rank() != 2 || K.shape() != Q.shape() || V.rank() != 2 || V.dim(0) != Q.dim(0)) {
        throw ShapeError("attention: Q " + shape_str(Q.shape()) + ", K " + shape_str(K.shape()) + ", V " +
                         shape_str(V.shape()));
    }
    const std::size_t n = Q.dim(0), z = Q.dim(1), zv = V.dim(1);
    Tensor<T> out(Shape{n, zv}, T{0});
    std::vector<T> row(n);
    for (std::size_t i = 0; i < n; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            T acc = 0;
            for (std::size_t p = 0; p < z; ++p) acc += Q[i * z + p] * K[j * z + p];
            row[j] = acc * scale;
            mx = std::max(mx, row[j]);
        }
        T total = 0;
        for (std::size_t j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            total += row[j];
        }
        T* o = out.data().data() + i * zv;
        for (std::size_t j = 0; j < n; ++j) {
            const T w = row[j] / total;
            for (std::size_t p = 0; p < zv; ++p) o[p] += w * V[j * zv + p];
        }
    }
    // scores 2nz + scale n^2, softmax 4n^2, weighted sum 2n zv
    flops::add(2ull * n * n * z + 5ull * n * n + 2ull * n * n * zv);
    return out;
}

template <class T>
Tensor<T> softmax_attention_reference(const Tensor<T>& X, const Tensor<T>& Wq, const Tensor<T>& Wk,
                                      const Tensor<T>& Wv) {
    if (X.rank() != 2) throw ShapeError("attention: X must be [N x Z], got " + shape_str(X.shape()));
    const T scale = T{1} / std::sqrt(static_cast<T>(X.dim(1)));
    return attention_core(matmul_plain(X, Wq), matmul_plain(X, Wk), matmul_plain(X, Wv), scale);
}

std::string BenchReport::to_csv() const {
    std::ostringstream os;
    os << "mixer,n,seconds,inner_reps,flops,state_bytes\n";
    for (const auto& r : rows) {
        os << r.mixer << ',' << r.n << ',' << fmt(r.seconds) << ',' << r.inner_reps << ',' << r.flops << ','
           << r.state_bytes << '\n';
    }
    return os.str();
}

std::string BenchReport::fits_csv() const {
    std::ostringstream os;
    os << "mixer,time_slope,flop_slope\n";
    for (const auto& f : fits) os << f.mixer << ',' << fmt(f.time_slope) << ',' << fmt(f.flop_slope) << '\n';
    return os.str();
}

const BenchFit& BenchReport::fit(const std::string& mixer) const {
    for (const auto& f : fits) {
        if (f.mixer == mixer) return f;
    }
    throw ContractError("no fit for mixer '" + mixer + "'");
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw ContractError("loglog_slope needs at least two paired points");
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    mx /= double(x.size());
    my /= double(x.size());
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = std::log(x[i]) - mx;
        sxy += dx * (std::log(y[i]) - my);
        sxx += dx * dx;
    }
    return sxy / sxx;
}

BenchReport run_bench(const BenchOptions& opts) {
    if (opts.sizes.size() < 4) throw ConfigError("bench needs at least 4 sizes for the slope fit");
    if (opts.repeats == 0) throw ConfigError("bench repeats must be positive");
    if (opts.heads == 0 || opts.embed_dim % opts.heads != 0) {
        throw ConfigError("bench embed_dim must be divisible by heads");
    }
    const std::size_t Z = opts.embed_dim;
    const std::size_t H = opts.heads;
    const std::size_t d = Z / H;
    BenchReport report;
    CounterRng rng(opts.seed, /*stream=*/0xBE);
    for (std::size_t n : opts.sizes) {
        const Tensor<float> q = random_tensor({n, Z}, rng, 1.0);
        const Tensor<float> k = random_tensor({n, Z}, rng, 1.0 / std::sqrt(double(d)));
        const Tensor<float> v = random_tensor({n, Z}, rng, 1.0);
        const Tensor<float> ig = random_tensor({n, H}, rng, 1.0);
        const Tensor<float> fg = random_tensor({n, H}, rng, 1.0);
        Tensor<float> h(Shape{n, Z});
        vil::MlstmState<float> state(H, d, d);

        auto run_mlstm = [&] {
            state.reset();
            for (std::size_t t = 0; t < n; ++t) {
                vil::mlstm_step(state, q.data().data() + t * Z, k.data().data() + t * Z, v.data().data() + t * Z,
                                ig.data().data() + t * H, fg.data().data() + t * H, h.data().data() + t * Z, t);
            }
        };
        BenchRow m{"mlstm", n, 0.0, 1, 0, state.bytes()};
        {
            flops::FlopScope fs;
            run_mlstm();
            m.flops = fs.count();
        }
        std::tie(m.seconds, m.inner_reps) = time_call(run_mlstm, opts.repeats, opts.min_seconds);
        report.rows.push_back(m);

        const float scale = 1.0f / std::sqrt(static_cast<float>(Z));
        auto run_attention = [&] { (void)attention_core(q, k, v, scale); };
        // The key/value cache grows with every token.
        BenchRow a{"attention", n, 0.0, 1, 0, 2 * n * Z * sizeof(float)};
        {
            flops::FlopScope fs;
            run_attention();
            a.flops = fs.count();
        }
        std::tie(a.seconds, a.inner_reps) = time_call(run_attention, opts.repeats, opts.min_seconds);
        report.rows.push_back(a);
    }
    for (const char* mixer : {"mlstm", "attention"}) {
        std::vector<double> ns, ts, fl;
        for (const auto& r : report.rows) {
            if (r.mixer != mixer) continue;
            ns.push_back(double(r.n));
            ts.push_back(r.seconds);
            fl.push_back(double(r.flops));
        }
        report.fits.push_back({mixer, loglog_slope(ns, ts), loglog_slope(ns, fl)});
    }
    return report;
}

template Tensor<float> attention_core(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, float);
template Tensor<double> attention_core(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, double);
template Tensor<float> softmax_attention_reference(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                                   const Tensor<float>&);
template Tensor<double> softmax_attention_reference(const Tensor<double>&, const Tensor<double>&,
                                                    const Tensor<double>&, const Tensor<double>&);

} // namespace uvx

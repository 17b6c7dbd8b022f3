#pragma once

// Flat parameter vectors, layer bookkeeping and deterministic RNG.
// Everything downstream (models, merging, baselines) builds on these types.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <memory>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace fedsim {

// ---------------------------------------------------------------------------
// Deterministic RNG
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Order-sensitive mix of a few words into one stream id.
inline std::uint64_t mix_stream(std::uint64_t a, std::uint64_t b = 0,
                                std::uint64_t c = 0, std::uint64_t d = 0) {
    std::uint64_t s = a;
    std::uint64_t h = splitmix64(s);
    s ^= b + 0x632be59bd9b4e019ULL;
    h ^= splitmix64(s);
    s ^= c + 0x9e3779b97f4a7c15ULL;
    h ^= splitmix64(s);
    s ^= d + 0xd1b54a32d192ed03ULL;
    h ^= splitmix64(s);
    return h;
}

// Counter-based generator: identical (seed, stream) pairs produce identical
// sequences on any platform and under any thread schedule. Distributions are
// hand-rolled because the std:: ones are implementation-defined.
class SeededRng {
public:
    SeededRng(std::uint64_t seed, std::uint64_t stream)
        : seed_(seed), stream_(stream), state_(mix_stream(seed, stream, 0x5eedULL)) {
        if (state_ == 0) state_ = 0x2545f4914f6cdd1dULL;
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

    std::uint64_t next_u64() { return splitmix64(state_); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("uniform_int: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    // Box-Muller; the spare value is cached so draws come in a fixed order.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double two_pi = 6.283185307179586476925286766559;
        spare_ = r * std::sin(two_pi * u2);
        has_spare_ = true;
        return r * std::cos(two_pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Fisher-Yates with our own bounded draws, so shuffles are reproducible.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Stream tags so independent parts of a run never share a sequence.
namespace stream_tag {
constexpr std::uint64_t datagen = 1;
constexpr std::uint64_t model_init = 2;
constexpr std::uint64_t client_sample = 3;
constexpr std::uint64_t local_train = 4;
constexpr std::uint64_t finetune = 5;
constexpr std::uint64_t fixed_subset = 6;
constexpr std::uint64_t probe = 7;
}  // namespace stream_tag

// ---------------------------------------------------------------------------
// Layer layout
// ---------------------------------------------------------------------------

struct LayerSpan {
    std::string name;
    std::size_t offset = 0;
    std::size_t length = 0;
    // Fan sizes of the producing affine map; used by the init scheme.
    std::size_t fan_in = 0;
    std::size_t fan_out = 0;

    bool operator==(const LayerSpan&) const = default;
};

class LayerLayout {
public:
    // Spans must be contiguous, non-overlapping and cover [0, P).
    LayerLayout(std::vector<LayerSpan> layers, std::size_t head_offset, std::size_t head_length)
        : layers_(std::move(layers)), head_offset_(head_offset), head_length_(head_length) {
        std::size_t expect = 0;
        for (const auto& l : layers_) {
            if (l.offset != expect)
                throw std::invalid_argument("LayerLayout: layer '" + l.name + "' not contiguous");
            expect += l.length;
        }
        total_ = expect;
        if (head_offset_ + head_length_ > total_)
            throw std::invalid_argument("LayerLayout: head range exceeds parameter count");
    }

    static std::shared_ptr<const LayerLayout> single(const std::string& name, std::size_t length) {
        std::vector<LayerSpan> spans{{name, 0, length, length, 1}};
        return std::make_shared<const LayerLayout>(std::move(spans), 0, length);
    }

    const std::vector<LayerSpan>& layers() const { return layers_; }
    std::size_t total() const { return total_; }
    std::size_t head_offset() const { return head_offset_; }
    std::size_t head_length() const { return head_length_; }

    bool operator==(const LayerLayout& o) const {
        return layers_ == o.layers_ && head_offset_ == o.head_offset_ &&
               head_length_ == o.head_length_;
    }

    nlohmann::json to_json() const {
        nlohmann::json layers = nlohmann::json::array();
        for (const auto& l : layers_) {
            layers.push_back({{"name", l.name},
                              {"offset", l.offset},
                              {"length", l.length},
                              {"fan_in", l.fan_in},
                              {"fan_out", l.fan_out}});
        }
        return {{"layers", layers},
                {"head", {{"offset", head_offset_}, {"length", head_length_}}}};
    }

    static std::shared_ptr<const LayerLayout> from_json(const nlohmann::json& j) {
        std::vector<LayerSpan> spans;
        for (const auto& l : j.at("layers")) {
            spans.push_back({l.at("name").get<std::string>(), l.at("offset").get<std::size_t>(),
                             l.at("length").get<std::size_t>(),
                             l.value("fan_in", std::size_t{0}),
                             l.value("fan_out", std::size_t{0})});
        }
        return std::make_shared<const LayerLayout>(std::move(spans),
                                                   j.at("head").at("offset").get<std::size_t>(),
                                                   j.at("head").at("length").get<std::size_t>());
    }

private:
    std::vector<LayerSpan> layers_;
    std::size_t head_offset_;
    std::size_t head_length_;
    std::size_t total_ = 0;
};

using LayoutPtr = std::shared_ptr<const LayerLayout>;

// ---------------------------------------------------------------------------
// ParamVector
// ---------------------------------------------------------------------------

class ParamVector {
public:
    explicit ParamVector(LayoutPtr layout)
        : layout_(require_layout(std::move(layout))), values_(layout_->total(), 0.0) {}

    ParamVector(LayoutPtr layout, std::vector<double> values)
        : layout_(require_layout(std::move(layout))), values_(std::move(values)) {
        if (values_.size() != layout_->total())
            throw std::invalid_argument("ParamVector: value count does not match layout");
        ensure_finite();
    }

    std::size_t size() const { return values_.size(); }
    const LayoutPtr& layout() const { return layout_; }

    double operator[](std::size_t i) const { return values_[i]; }
    double& operator[](std::size_t i) { return values_[i]; }

    std::span<const double> values() const { return values_; }
    std::span<double> values() { return values_; }
    const double* data() const { return values_.data(); }
    double* data() { return values_.data(); }

    bool same_layout(const ParamVector& o) const {
        return layout_ == o.layout_ || *layout_ == *o.layout_;
    }

    void ensure_finite() const {
        for (double v : values_)
            if (!std::isfinite(v))
                throw std::runtime_error("ParamVector: non-finite entry");
    }

    double norm() const {
        double s = 0.0;
        for (double v : values_) s += v * v;
        return std::sqrt(s);
    }

    // y += alpha * x, fixed ascending-index order.
    void axpy_inplace(double alpha, const ParamVector& x) {
        if (!same_layout(x)) throw std::invalid_argument("axpy: layout mismatch");
        for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += alpha * x.values_[i];
        ensure_finite();
    }

    void scale(double alpha) {
        for (double& v : values_) v *= alpha;
        ensure_finite();
    }

private:
    static LayoutPtr require_layout(LayoutPtr l) {
        if (!l) throw std::invalid_argument("ParamVector: null layout");
        return l;
    }

    LayoutPtr layout_;
    std::vector<double> values_;
};

inline ParamVector axpy(double alpha, const ParamVector& x, const ParamVector& y) {
    if (!x.same_layout(y)) throw std::invalid_argument("axpy: layout mismatch");
    ParamVector out = y;
    out.axpy_inplace(alpha, x);
    return out;
}

// Inner product with a fixed sequential summation order. `restrict_to_head`
// limits the sum to the layout's classification-head slice.
inline double dot(const ParamVector& x, const ParamVector& y, bool restrict_to_head = false) {
    if (!x.same_layout(y)) throw std::invalid_argument("dot: layout mismatch");
    std::size_t lo = 0, hi = x.size();
    if (restrict_to_head) {
        lo = x.layout()->head_offset();
        hi = lo + x.layout()->head_length();
    }
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += x[i] * y[i];
    return s;
}

// Sum of a small scratch list in a canonical (value-sorted) order, so results
// do not depend on how the caller happened to index the terms.
inline double stable_sum(std::vector<double>& terms) {
    std::sort(terms.begin(), terms.end());
    double s = 0.0;
    for (double t : terms) s += t;
    return s;
}

enum class InitScheme { glorot_uniform, zeros };

// Per-layer uniform init in +-sqrt(6 / (fan_in + fan_out)).
inline ParamVector random_init(LayoutPtr layout, SeededRng& rng,
                               InitScheme scheme = InitScheme::glorot_uniform) {
    ParamVector out(layout);
    if (scheme == InitScheme::zeros) return out;
    for (const auto& l : layout->layers()) {
        const double fan = double(l.fan_in + l.fan_out);
        const double bound = fan > 0.0 ? std::sqrt(6.0 / fan) : 0.0;
        for (std::size_t i = 0; i < l.length; ++i)
            out[l.offset + i] = rng.uniform(-bound, bound);
    }
    out.ensure_finite();
    return out;
}

// ---------------------------------------------------------------------------
// Serialization: u64 little-endian length prefix, then float64 little-endian.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw std::runtime_error("param vector stream truncated");
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

}  // namespace detail

inline void save_param_vector(std::ostream& os, const ParamVector& v) {
    detail::write_le<std::uint64_t>(os, v.size());
    for (std::size_t i = 0; i < v.size(); ++i) detail::write_le<double>(os, v[i]);
}

inline ParamVector load_param_vector(std::istream& is, LayoutPtr layout) {
    const auto n = detail::read_le<std::uint64_t>(is);
    if (n != layout->total())
        throw std::runtime_error("param vector length does not match layout");
    std::vector<double> vals(n);
    for (auto& x : vals) x = detail::read_le<double>(is);
    return ParamVector(std::move(layout), std::move(vals));
}

}  // namespace fedsim

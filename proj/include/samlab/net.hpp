#pragma once

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "samlab/common.hpp"
#include "samlab/rng.hpp"

namespace samlab {

enum class Activation { tanh, relu };

inline const char* activation_name(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

inline Activation activation_from_name(const std::string& s) {
    if (s == "tanh") return Activation::tanh;
    if (s == "relu") return Activation::relu;
    throw std::invalid_argument("unknown activation: " + s);
}

/// Parameter-aligned gradient accumulator.
struct GradientTape {
    Vec param_grad;
    Vec input_grad;

    void add(const GradientTape& other, double scale = 1.0) {
        if (param_grad.size() != other.param_grad.size()) throw std::invalid_argument("GradientTape: shape mismatch");
        for (std::size_t i = 0; i < param_grad.size(); ++i) param_grad[i] += scale * other.param_grad[i];
        if (input_grad.size() == other.input_grad.size())
            for (std::size_t i = 0; i < input_grad.size(); ++i) input_grad[i] += scale * other.input_grad[i];
    }

    void scale(double c) {
        for (double& g : param_grad) g *= c;
        for (double& g : input_grad) g *= c;
    }

    double norm() const {
        double acc = 0.0;
        for (double g : param_grad) acc += g * g;
        return std::sqrt(acc);
    }
};

/// Fully-connected network with explicit reverse-mode gradients. Parameters
/// live in one flat vector (per layer: weight matrix row-major, then bias);
/// forward caches activations for the following backward.
class Network {
  public:
    Network() = default;

    Network(std::vector<int> layer_sizes, Activation act, Rng& rng, double output_gain = 1.0)
        : layer_sizes_(std::move(layer_sizes)), activation_(act) {
        if (layer_sizes_.size() < 2) throw std::invalid_argument("Network: need at least input and output sizes");
        std::size_t count = 0;
        for (std::size_t l = 0; l + 1 < layer_sizes_.size(); ++l)
            count += static_cast<std::size_t>(layer_sizes_[l]) * static_cast<std::size_t>(layer_sizes_[l + 1]) +
                     static_cast<std::size_t>(layer_sizes_[l + 1]);
        params_.assign(count, 0.0);
        std::size_t off = 0;
        for (std::size_t l = 0; l + 1 < layer_sizes_.size(); ++l) {
            int fan_in = layer_sizes_[l];
            int fan_out = layer_sizes_[l + 1];
            bool last = (l + 2 == layer_sizes_.size());
            double gain = (last ? output_gain : 1.0) / std::sqrt(static_cast<double>(fan_in));
            for (int i = 0; i < fan_out * fan_in; ++i) params_[off++] = gain * rng.normal();
            off += static_cast<std::size_t>(fan_out);  // biases stay zero
        }
    }

    int input_size() const { return layer_sizes_.front(); }
    int output_size() const { return layer_sizes_.back(); }
    const std::vector<int>& layer_sizes() const { return layer_sizes_; }
    Activation activation() const { return activation_; }
    std::size_t parameter_count() const { return params_.size(); }
    Vec& params() { return params_; }
    const Vec& params() const { return params_; }

    Vec forward(const Vec& input) const {
        if (static_cast<int>(input.size()) != input_size()) throw std::invalid_argument("Network::forward: input size mismatch");
        cache_.assign(1, input);
        Vec h = input;
        std::size_t off = 0;
        for (std::size_t l = 0; l + 1 < layer_sizes_.size(); ++l) {
            int in = layer_sizes_[l];
            int out = layer_sizes_[l + 1];
            Vec z(static_cast<std::size_t>(out));
            for (int i = 0; i < out; ++i) {
                double acc = params_[off + static_cast<std::size_t>(out * in + i)];  // bias
                const double* w = &params_[off + static_cast<std::size_t>(i * in)];
                for (int j = 0; j < in; ++j) acc += w[j] * h[static_cast<std::size_t>(j)];
                z[static_cast<std::size_t>(i)] = acc;
            }
            bool last = (l + 2 == layer_sizes_.size());
            if (!last) {
                for (double& v : z) v = activation_ == Activation::tanh ? std::tanh(v) : std::max(0.0, v);
            }
            cache_.push_back(z);
            h = std::move(z);
            off += static_cast<std::size_t>(out * in + out);
        }
        has_cache_ = true;
        return h;
    }

    /// Gradients of output . upstream_grad wrt parameters and input, using
    /// the cache of the most recent forward.
    GradientTape backward(const Vec& upstream_grad) const {
        if (!has_cache_) throw std::logic_error("Network::backward: no cached forward pass");
        if (static_cast<int>(upstream_grad.size()) != output_size())
            throw std::invalid_argument("Network::backward: upstream size mismatch");
        GradientTape tape;
        tape.param_grad.assign(params_.size(), 0.0);
        Vec delta = upstream_grad;
        std::size_t off = params_.size();
        for (std::size_t l = layer_sizes_.size() - 1; l >= 1; --l) {
            int in = layer_sizes_[l - 1];
            int out = layer_sizes_[l];
            off -= static_cast<std::size_t>(out * in + out);
            const Vec& post = cache_[l];
            const Vec& prev = cache_[l - 1];
            bool last = (l + 1 == layer_sizes_.size());
            if (!last) {
                // cache holds post-activation; invert through the nonlinearity
                for (int i = 0; i < out; ++i) {
                    double h = post[static_cast<std::size_t>(i)];
                    double dz = activation_ == Activation::tanh ? (1.0 - h * h) : (h > 0.0 ? 1.0 : 0.0);
                    delta[static_cast<std::size_t>(i)] *= dz;
                }
            }
            Vec next_delta(static_cast<std::size_t>(in), 0.0);
            for (int i = 0; i < out; ++i) {
                double d = delta[static_cast<std::size_t>(i)];
                tape.param_grad[off + static_cast<std::size_t>(out * in + i)] += d;  // bias
                double* gw = &tape.param_grad[off + static_cast<std::size_t>(i * in)];
                const double* w = &params_[off + static_cast<std::size_t>(i * in)];
                for (int j = 0; j < in; ++j) {
                    gw[j] += d * prev[static_cast<std::size_t>(j)];
                    next_delta[static_cast<std::size_t>(j)] += d * w[j];
                }
            }
            delta = std::move(next_delta);
            if (l == 1) break;
        }
        tape.input_grad = delta;
        return tape;
    }

    void apply_gradient(const Vec& grad, double step) {
        if (grad.size() != params_.size()) throw std::invalid_argument("Network::apply_gradient: shape mismatch");
        for (std::size_t i = 0; i < params_.size(); ++i) params_[i] += step * grad[i];
    }

  private:
    friend void save_network(const Network&, std::ostream&);
    friend Network load_network(std::istream&);

    std::vector<int> layer_sizes_;
    Activation activation_ = Activation::tanh;
    Vec params_;
    mutable std::vector<Vec> cache_;
    mutable bool has_cache_ = false;
};

// ---------------------------------------------------------------------------
// Heads

inline Vec softmax(const Vec& logits) {
    double m = logits[0];
    for (double z : logits) m = std::max(m, z);
    Vec p(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - m);
        sum += p[i];
    }
    for (double& v : p) v /= sum;
    return p;
}

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

/// Diagonal Gaussian from a raw output split in halves; log-std clamped.
struct GaussianHead {
    Vec mean;
    Vec log_std;
    std::vector<bool> clamped;  // per-dim: log-std hit a clamp bound

    std::size_t dim() const { return mean.size(); }
};

inline GaussianHead gaussian_head(const Vec& raw) {
    if (raw.size() % 2 != 0) throw std::invalid_argument("gaussian_head: raw output width must be even");
    std::size_t d = raw.size() / 2;
    GaussianHead h;
    h.mean.assign(raw.begin(), raw.begin() + static_cast<std::ptrdiff_t>(d));
    h.log_std.resize(d);
    h.clamped.resize(d);
    for (std::size_t i = 0; i < d; ++i) {
        double ls = raw[d + i];
        h.clamped[i] = ls < kLogStdMin || ls > kLogStdMax;
        h.log_std[i] = std::clamp(ls, kLogStdMin, kLogStdMax);
    }
    return h;
}

inline double categorical_log_prob(const Vec& probs, int action) {
    if (action < 0 || action >= static_cast<int>(probs.size())) throw std::invalid_argument("categorical_log_prob: bad action");
    return std::log(std::max(probs[static_cast<std::size_t>(action)], 1e-300));
}

/// d log p(a) / d logits = onehot(a) - probs.
inline Vec categorical_log_prob_grad(const Vec& probs, int action) {
    Vec g(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) g[i] = -probs[i];
    g[static_cast<std::size_t>(action)] += 1.0;
    return g;
}

inline double gaussian_log_prob(const GaussianHead& h, const Vec& action) {
    if (action.size() != h.dim()) throw std::invalid_argument("gaussian_log_prob: dimension mismatch");
    double lp = 0.0;
    for (std::size_t i = 0; i < h.dim(); ++i) {
        double sigma = std::exp(h.log_std[i]);
        double z = (action[i] - h.mean[i]) / sigma;
        lp += -0.5 * z * z - h.log_std[i] - 0.5 * std::log(2.0 * M_PI);
    }
    return lp;
}

/// Gradient wrt the raw head output [mean..., log_std...]; clamped log-std
/// components get zero gradient.
inline Vec gaussian_log_prob_grad(const GaussianHead& h, const Vec& action) {
    std::size_t d = h.dim();
    Vec g(2 * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        double sigma = std::exp(h.log_std[i]);
        double z = (action[i] - h.mean[i]) / sigma;
        g[i] = z / sigma;
        if (!h.clamped[i]) g[d + i] = z * z - 1.0;
    }
    return g;
}

inline double categorical_entropy(const Vec& probs) {
    double h = 0.0;
    for (double p : probs)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

inline Vec categorical_entropy_grad(const Vec& probs) {
    double h = categorical_entropy(probs);
    Vec g(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i)
        g[i] = -probs[i] * ((probs[i] > 0.0 ? std::log(probs[i]) : 0.0) + h);
    return g;
}

inline double gaussian_entropy(const GaussianHead& h) {
    double acc = 0.0;
    for (double ls : h.log_std) acc += ls + 0.5 * std::log(2.0 * M_PI * std::exp(1.0));
    return acc;
}

// ---------------------------------------------------------------------------
// Closed-form KL between heads

inline double kl_categorical(const Vec& p_logits_or_probs_a, const Vec& probs_b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < probs_b.size(); ++i) {
        double p = p_logits_or_probs_a[i];
        if (p == 0.0) continue;
        acc += p * std::log(p / std::max(probs_b[i], 1e-300));
    }
    return acc;
}

/// d KL(p || q) / d logits_q = q - p, with p held constant.
inline Vec kl_categorical_grad_q_logits(const Vec& p, const Vec& q) {
    Vec g(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) g[i] = q[i] - p[i];
    return g;
}

inline double kl_gaussian(const GaussianHead& a, const GaussianHead& b) {
    if (a.dim() != b.dim()) throw std::invalid_argument("kl_gaussian: dimension mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.dim(); ++i) {
        double va = std::exp(2.0 * a.log_std[i]);
        double vb = std::exp(2.0 * b.log_std[i]);
        double dm = a.mean[i] - b.mean[i];
        acc += b.log_std[i] - a.log_std[i] + (va + dm * dm) / (2.0 * vb) - 0.5;
    }
    return acc;
}

/// d KL(a || b) / d raw_b, with a held constant (stop-gradient clean branch).
inline Vec kl_gaussian_grad_b_raw(const GaussianHead& a, const GaussianHead& b) {
    std::size_t d = a.dim();
    Vec g(2 * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        double va = std::exp(2.0 * a.log_std[i]);
        double vb = std::exp(2.0 * b.log_std[i]);
        double dm = b.mean[i] - a.mean[i];
        g[i] = dm / vb;
        if (!b.clamped[i]) g[d + i] = 1.0 - (va + dm * dm) / vb;
    }
    return g;
}

// ---------------------------------------------------------------------------
// Policy wrapper

enum class HeadKind { categorical, gaussian };

/// Network plus a distribution head. Categorical heads read the output as
/// logits; Gaussian heads split it into mean and log-std halves.
struct NetPolicy {
    Network net;
    HeadKind head = HeadKind::categorical;

    int action_dim() const {
        return head == HeadKind::categorical ? net.output_size() : net.output_size() / 2;
    }

    Vec action_probs(const Vec& obs) const { return softmax(net.forward(obs)); }
    GaussianHead gaussian(const Vec& obs) const { return gaussian_head(net.forward(obs)); }

    int sample_discrete(const Vec& obs, Rng& rng) const { return rng.categorical(action_probs(obs)); }

    Vec sample_continuous(const Vec& obs, Rng& rng) const {
        GaussianHead h = gaussian(obs);
        Vec a(h.dim());
        for (std::size_t i = 0; i < h.dim(); ++i) a[i] = h.mean[i] + std::exp(h.log_std[i]) * rng.normal();
        return a;
    }
};

// ---------------------------------------------------------------------------
// Checkpoints

inline void save_network(const Network& net, std::ostream& os) {
    os << "samlab-net v1\n";
    os << "layers";
    for (int n : net.layer_sizes_) os << ' ' << n;
    os << "\nactivation " << activation_name(net.activation_) << "\n";
    std::string blob = encode_doubles(net.params_);
    os << "params " << blob << "\n";
    os << "checksum " << hex64(fnv1a(blob)) << "\n";
}

inline Network load_network(std::istream& is) {
    std::string magic, version;
    is >> magic >> version;
    if (magic != "samlab-net" || version != "v1") throw std::runtime_error("load_network: bad header");
    Network net;
    std::string key;
    is >> key;
    if (key != "layers") throw std::runtime_error("load_network: expected layers");
    std::string line;
    std::getline(is, line);
    std::istringstream ls(line);
    int n;
    while (ls >> n) net.layer_sizes_.push_back(n);
    std::string act, blob, checksum;
    is >> key >> act;
    if (key != "activation") throw std::runtime_error("load_network: expected activation");
    net.activation_ = activation_from_name(act);
    is >> key >> blob;
    if (key != "params") throw std::runtime_error("load_network: expected params");
    is >> key >> checksum;
    if (key != "checksum") throw std::runtime_error("load_network: expected checksum");
    if (checksum != hex64(fnv1a(blob))) throw std::runtime_error("load_network: checksum mismatch");
    net.params_ = decode_doubles(blob);
    std::size_t count = 0;
    for (std::size_t l = 0; l + 1 < net.layer_sizes_.size(); ++l)
        count += static_cast<std::size_t>(net.layer_sizes_[l]) * static_cast<std::size_t>(net.layer_sizes_[l + 1]) +
                 static_cast<std::size_t>(net.layer_sizes_[l + 1]);
    if (count != net.params_.size()) throw std::runtime_error("load_network: parameter block size mismatch");
    return net;
}

inline void save_policy(const NetPolicy& pol, std::ostream& os) {
    os << "samlab-policy v1\n";
    os << "head " << (pol.head == HeadKind::categorical ? "categorical" : "gaussian") << "\n";
    save_network(pol.net, os);
}

inline NetPolicy load_policy(std::istream& is) {
    std::string magic, version, key, head;
    is >> magic >> version >> key >> head;
    if (magic != "samlab-policy" || version != "v1" || key != "head") throw std::runtime_error("load_policy: bad header");
    NetPolicy pol;
    pol.head = head == "categorical" ? HeadKind::categorical : HeadKind::gaussian;
    pol.net = load_network(is);
    return pol;
}

inline void save_policy(const NetPolicy& pol, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("save_policy: cannot open " + path);
    save_policy(pol, os);
}

inline NetPolicy load_policy(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_policy: cannot open " + path);
    return load_policy(is);
}

}  // namespace samlab

#include "diffabm/variational.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "diffabm/scalar_ops.hpp"

namespace diffabm {

namespace {

constexpr double kLogTwoPi = 1.8378770664093453;  // log(2 pi)

// Scale head output map: softplus(s + shift) + floor, with the shift chosen
// so a zero-initialised head yields scale 1 and the floor keeping scales
// bounded away from 0.
constexpr double kScaleShift = 0.5413248546129181;  // log(e - 1)
constexpr double kScaleFloor = 1e-3;

template <class S>
S positive_scale(const S& raw) {
    return softplus(raw + kScaleShift) + kScaleFloor;
}

}  // namespace

VariationalFamily::Instantiated VariationalFamily::instantiate(Tape& tape) const {
    const Eigen::VectorXd phi = parameters();
    Instantiated inst;
    inst.params.reserve(static_cast<std::size_t>(phi.size()));
    for (Eigen::Index i = 0; i < phi.size(); ++i) {
        inst.params.push_back(make_leaf(tape, phi[i]));
    }
    return inst;
}

TracedValue VariationalFamily::kl_to_std_normal_traced(Tape&, const Instantiated&) const {
    throw std::logic_error("kl_to_std_normal_traced: no closed form for this family");
}

std::unique_ptr<VariationalFamily> VariationalFamily::from_json(const nlohmann::json& j) {
    const std::string family = j.at("family").get<std::string>();
    const int d = j.at("dim").get<int>();
    const auto values = j.at("parameters").get<std::vector<double>>();
    if (family == "diag_gaussian") {
        if (values.size() != static_cast<std::size_t>(2 * d)) {
            throw std::invalid_argument("diag_gaussian: parameter count mismatch");
        }
        Eigen::VectorXd mu(d), ls(d);
        for (int i = 0; i < d; ++i) {
            mu[i] = values[static_cast<std::size_t>(i)];
            ls[i] = values[static_cast<std::size_t>(d + i)];
        }
        return std::make_unique<DiagonalGaussian>(std::move(mu), std::move(ls));
    }
    if (family == "masked_flow") {
        MaskedAutoregressiveFlow::Config cfg;
        cfg.dim = d;
        cfg.layers = j.at("layers").get<int>();
        cfg.hidden = j.at("hidden").get<int>();
        auto flow = std::make_unique<MaskedAutoregressiveFlow>(cfg, RngStream(0, 0));
        if (values.size() != static_cast<std::size_t>(flow->param_count())) {
            throw std::invalid_argument("masked_flow: parameter count mismatch");
        }
        Eigen::VectorXd phi(flow->param_count());
        for (std::size_t i = 0; i < values.size(); ++i) {
            phi[static_cast<Eigen::Index>(i)] = values[i];
        }
        flow->set_parameters(phi);
        return flow;
    }
    throw std::invalid_argument("unknown variational family: " + family);
}

// ---------------------------------------------------------------------------
// DiagonalGaussian

DiagonalGaussian::DiagonalGaussian(int dim)
    : mu_(Eigen::VectorXd::Zero(dim)), log_sigma_(Eigen::VectorXd::Zero(dim)) {
    if (dim < 1) throw std::invalid_argument("DiagonalGaussian: dim must be >= 1");
}

DiagonalGaussian::DiagonalGaussian(Eigen::VectorXd mu, Eigen::VectorXd log_sigma)
    : mu_(std::move(mu)), log_sigma_(std::move(log_sigma)) {
    if (mu_.size() != log_sigma_.size() || mu_.size() < 1) {
        throw std::invalid_argument("DiagonalGaussian: mu/log_sigma size mismatch");
    }
    if (!mu_.allFinite() || !log_sigma_.allFinite()) {
        throw std::invalid_argument("DiagonalGaussian: parameters must be finite");
    }
}

Eigen::VectorXd DiagonalGaussian::parameters() const {
    Eigen::VectorXd phi(2 * dim());
    phi << mu_, log_sigma_;
    return phi;
}

void DiagonalGaussian::set_parameters(const Eigen::VectorXd& phi) {
    if (phi.size() != 2 * dim()) {
        throw std::invalid_argument("DiagonalGaussian::set_parameters: size mismatch");
    }
    mu_ = phi.head(dim());
    log_sigma_ = phi.tail(dim());
}

std::unique_ptr<VariationalFamily> DiagonalGaussian::clone() const {
    return std::make_unique<DiagonalGaussian>(*this);
}

VariationalFamily::TracedSample DiagonalGaussian::sample_traced(Tape&, const Instantiated& inst,
                                                                const RngStream& noise) const {
    const int d = dim();
    TracedSample out;
    out.theta.reserve(static_cast<std::size_t>(d));
    double base_sq = 0.0;
    TracedValue sum_log_sigma(0.0);
    for (int i = 0; i < d; ++i) {
        const double u = noise.normal_at(static_cast<std::uint64_t>(i));
        base_sq += u * u;
        const TracedValue& mu = inst.params[static_cast<std::size_t>(i)];
        const TracedValue& ls = inst.params[static_cast<std::size_t>(d + i)];
        out.theta.push_back(mu + exp(ls) * u);
        sum_log_sigma += ls;
    }
    // log q(theta(u)) = -sum log sigma - ||u||^2 / 2 - d/2 log 2 pi.
    out.log_density = -sum_log_sigma - (0.5 * base_sq + 0.5 * d * kLogTwoPi);
    return out;
}

Eigen::VectorXd DiagonalGaussian::sample_values(const RngStream& noise) const {
    Eigen::VectorXd theta(dim());
    for (int i = 0; i < dim(); ++i) {
        theta[i] = mu_[i] + std::exp(log_sigma_[i]) * noise.normal_at(static_cast<std::uint64_t>(i));
    }
    return theta;
}

TracedValue DiagonalGaussian::log_prob_traced(Tape&, const Instantiated& inst,
                                              std::span<const double> theta) const {
    const int d = dim();
    if (theta.size() != static_cast<std::size_t>(d)) {
        throw std::invalid_argument("DiagonalGaussian::log_prob_traced: dim mismatch");
    }
    TracedValue total(-0.5 * d * kLogTwoPi);
    for (int i = 0; i < d; ++i) {
        const TracedValue& mu = inst.params[static_cast<std::size_t>(i)];
        const TracedValue& ls = inst.params[static_cast<std::size_t>(d + i)];
        TracedValue standardized = (theta[static_cast<std::size_t>(i)] - mu) * exp(-ls);
        total += -ls - 0.5 * standardized * standardized;
    }
    return total;
}

TracedValue DiagonalGaussian::kl_to_std_normal_traced(Tape&, const Instantiated& inst) const {
    const int d = dim();
    TracedValue total(0.0);
    for (int i = 0; i < d; ++i) {
        const TracedValue& mu = inst.params[static_cast<std::size_t>(i)];
        const TracedValue& ls = inst.params[static_cast<std::size_t>(d + i)];
        TracedValue sigma = exp(ls);
        total += 0.5 * (mu * mu + sigma * sigma - 1.0) - ls;
    }
    return total;
}

double DiagonalGaussian::kl_to_std_normal() const {
    double total = 0.0;
    for (int i = 0; i < dim(); ++i) {
        const double sigma = std::exp(log_sigma_[i]);
        total += 0.5 * (mu_[i] * mu_[i] + sigma * sigma - 1.0) - log_sigma_[i];
    }
    return total;
}

nlohmann::json DiagonalGaussian::to_json() const {
    const Eigen::VectorXd phi = parameters();
    return nlohmann::json{{"family", "diag_gaussian"},
                          {"dim", dim()},
                          {"parameters", std::vector<double>(phi.data(), phi.data() + phi.size())}};
}

// ---------------------------------------------------------------------------
// MaskedAutoregressiveFlow

namespace {

// Flat layout of one masked layer's parameters.
struct LayerLayout {
    int d = 0;
    int h = 0;

    int w1() const { return 0; }                       // h x d
    int b1() const { return h * d; }                   // h
    int w2() const { return b1() + h; }                // h x h
    int b2() const { return w2() + h * h; }            // h
    int wm() const { return b2() + h; }                // d x h
    int bm() const { return wm() + d * h; }            // d
    int ws() const { return bm() + d; }                // d x h
    int bs() const { return ws() + d * h; }            // d
    int total() const { return bs() + d; }
};

// MADE degrees: inputs 1..d, hidden cycling 1..max(1, d-1), outputs 1..d
// with a strict mask on the heads so output i depends only on inputs < i.
struct Made {
    LayerLayout layout;
    std::vector<int> hidden_degree;

    Made(int d, int h) : layout{d, h}, hidden_degree(static_cast<std::size_t>(h)) {
        const int max_deg = std::max(1, d - 1);
        for (int k = 0; k < h; ++k) hidden_degree[static_cast<std::size_t>(k)] = 1 + k % max_deg;
    }

    bool mask1(int k, int i) const { return i + 1 <= hidden_degree[static_cast<std::size_t>(k)]; }
    bool mask2(int k2, int k1) const {
        return hidden_degree[static_cast<std::size_t>(k1)] <=
               hidden_degree[static_cast<std::size_t>(k2)];
    }
    bool mask_out(int o, int k) const {
        return hidden_degree[static_cast<std::size_t>(k)] < o + 1;
    }

    // Shift and raw-scale heads for the autoregressive conditioners.
    template <class S>
    void eval(std::span<const S> layer_params, std::span<const S> x, std::vector<S>& mu,
              std::vector<S>& raw_scale, std::vector<S>& h1, std::vector<S>& h2) const {
        const int d = layout.d;
        const int h = layout.h;
        h1.assign(static_cast<std::size_t>(h), S(0.0));
        h2.assign(static_cast<std::size_t>(h), S(0.0));
        mu.assign(static_cast<std::size_t>(d), S(0.0));
        raw_scale.assign(static_cast<std::size_t>(d), S(0.0));
        for (int k = 0; k < h; ++k) {
            S acc = layer_params[static_cast<std::size_t>(layout.b1() + k)];
            for (int i = 0; i < d; ++i) {
                if (!mask1(k, i)) continue;
                acc += layer_params[static_cast<std::size_t>(layout.w1() + k * d + i)] * x[static_cast<std::size_t>(i)];
            }
            h1[static_cast<std::size_t>(k)] = tanh(acc);
        }
        for (int k2 = 0; k2 < h; ++k2) {
            S acc = layer_params[static_cast<std::size_t>(layout.b2() + k2)];
            for (int k1 = 0; k1 < h; ++k1) {
                if (!mask2(k2, k1)) continue;
                acc += layer_params[static_cast<std::size_t>(layout.w2() + k2 * h + k1)] *
                       h1[static_cast<std::size_t>(k1)];
            }
            h2[static_cast<std::size_t>(k2)] = tanh(acc);
        }
        for (int o = 0; o < d; ++o) {
            S accm = layer_params[static_cast<std::size_t>(layout.bm() + o)];
            S accs = layer_params[static_cast<std::size_t>(layout.bs() + o)];
            for (int k = 0; k < h; ++k) {
                if (!mask_out(o, k)) continue;
                accm += layer_params[static_cast<std::size_t>(layout.wm() + o * h + k)] *
                        h2[static_cast<std::size_t>(k)];
                accs += layer_params[static_cast<std::size_t>(layout.ws() + o * h + k)] *
                        h2[static_cast<std::size_t>(k)];
            }
            mu[static_cast<std::size_t>(o)] = accm;
            raw_scale[static_cast<std::size_t>(o)] = accs;
        }
    }
};

template <class S>
struct FlowSampleResult {
    std::vector<S> theta;
    S log_density;
};

// Sampling direction: one masked-net pass per layer, dimensions reversed
// between layers.
template <class S>
FlowSampleResult<S> flow_sample(const MaskedAutoregressiveFlow::Config& cfg,
                                std::span<const S> params, std::span<const double> z) {
    const Made made(cfg.dim, cfg.hidden);
    const int per_layer = made.layout.total();
    std::vector<S> x;
    x.reserve(z.size());
    double base_sq = 0.0;
    for (double u : z) {
        x.push_back(S(u));
        base_sq += u * u;
    }
    S log_det(0.0);
    std::vector<S> mu, raw, h1, h2, scratch(x.size(), S(0.0));
    for (int l = 0; l < cfg.layers; ++l) {
        auto layer = params.subspan(static_cast<std::size_t>(l * per_layer),
                                    static_cast<std::size_t>(per_layer));
        made.eval(layer, std::span<const S>(x), mu, raw, h1, h2);
        for (int i = 0; i < cfg.dim; ++i) {
            S scale = positive_scale(raw[static_cast<std::size_t>(i)]);
            x[static_cast<std::size_t>(i)] =
                x[static_cast<std::size_t>(i)] * scale + mu[static_cast<std::size_t>(i)];
            log_det += log(scale);
        }
        std::reverse(x.begin(), x.end());
    }
    FlowSampleResult<S> out;
    out.log_density = -(0.5 * base_sq + 0.5 * cfg.dim * kLogTwoPi) - log_det;
    out.theta = std::move(x);
    return out;
}

// Density direction: sequential inversion, one masked-net pass per
// dimension per layer.
template <class S>
S flow_log_prob(const MaskedAutoregressiveFlow::Config& cfg, std::span<const S> params,
                std::span<const double> theta) {
    const Made made(cfg.dim, cfg.hidden);
    const int per_layer = made.layout.total();
    std::vector<S> x;
    x.reserve(theta.size());
    for (double v : theta) x.push_back(S(v));
    S log_det(0.0);
    std::vector<S> mu, raw, h1, h2;
    for (int l = cfg.layers - 1; l >= 0; --l) {
        std::reverse(x.begin(), x.end());
        auto layer = params.subspan(static_cast<std::size_t>(l * per_layer),
                                    static_cast<std::size_t>(per_layer));
        std::vector<S> z(static_cast<std::size_t>(cfg.dim), S(0.0));
        for (int i = 0; i < cfg.dim; ++i) {
            made.eval(layer, std::span<const S>(z), mu, raw, h1, h2);
            S scale = positive_scale(raw[static_cast<std::size_t>(i)]);
            z[static_cast<std::size_t>(i)] =
                (x[static_cast<std::size_t>(i)] - mu[static_cast<std::size_t>(i)]) / scale;
            log_det += log(scale);
        }
        x = std::move(z);
    }
    S base_sq(0.0);
    for (int i = 0; i < cfg.dim; ++i) {
        base_sq += x[static_cast<std::size_t>(i)] * x[static_cast<std::size_t>(i)];
    }
    return -(0.5 * base_sq + 0.5 * cfg.dim * kLogTwoPi) - log_det;
}

}  // namespace

MaskedAutoregressiveFlow::MaskedAutoregressiveFlow(const Config& config, RngStream init_rng)
    : config_(config) {
    if (config.dim < 1 || config.layers < 1 || config.hidden < 1) {
        throw std::invalid_argument("MaskedAutoregressiveFlow: invalid configuration");
    }
    const Made made(config.dim, config.hidden);
    const LayerLayout& lay = made.layout;
    params_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(config.layers) * lay.total());
    // Hidden-block weights start small and random to break symmetry; the
    // output heads start at zero so the flow begins at the identity.
    const double a1 = 1.0 / std::sqrt(static_cast<double>(config.dim));
    const double a2 = 1.0 / std::sqrt(static_cast<double>(config.hidden));
    std::uint64_t draw = 0;
    for (int l = 0; l < config.layers; ++l) {
        const Eigen::Index base = static_cast<Eigen::Index>(l) * lay.total();
        for (int k = 0; k < lay.h; ++k) {
            for (int i = 0; i < lay.d; ++i) {
                if (made.mask1(k, i)) {
                    params_[base + lay.w1() + k * lay.d + i] =
                        a1 * (2.0 * init_rng.uniform_at(draw++) - 1.0);
                }
            }
        }
        for (int k2 = 0; k2 < lay.h; ++k2) {
            for (int k1 = 0; k1 < lay.h; ++k1) {
                if (made.mask2(k2, k1)) {
                    params_[base + lay.w2() + k2 * lay.h + k1] =
                        a2 * (2.0 * init_rng.uniform_at(draw++) - 1.0);
                }
            }
        }
    }
}

void MaskedAutoregressiveFlow::set_parameters(const Eigen::VectorXd& phi) {
    if (phi.size() != params_.size()) {
        throw std::invalid_argument("MaskedAutoregressiveFlow::set_parameters: size mismatch");
    }
    params_ = phi;
}

std::unique_ptr<VariationalFamily> MaskedAutoregressiveFlow::clone() const {
    return std::make_unique<MaskedAutoregressiveFlow>(*this);
}

VariationalFamily::TracedSample MaskedAutoregressiveFlow::sample_traced(
    Tape&, const Instantiated& inst, const RngStream& noise) const {
    std::vector<double> z(static_cast<std::size_t>(config_.dim));
    for (int i = 0; i < config_.dim; ++i) z[static_cast<std::size_t>(i)] = noise.normal_at(static_cast<std::uint64_t>(i));
    auto result = flow_sample<TracedValue>(config_, std::span<const TracedValue>(inst.params),
                                           std::span<const double>(z));
    return {std::move(result.theta), result.log_density};
}

Eigen::VectorXd MaskedAutoregressiveFlow::sample_values(const RngStream& noise) const {
    return sample_with_log_density(noise).first;
}

std::pair<Eigen::VectorXd, double> MaskedAutoregressiveFlow::sample_with_log_density(
    const RngStream& noise) const {
    std::vector<double> z(static_cast<std::size_t>(config_.dim));
    for (int i = 0; i < config_.dim; ++i) z[static_cast<std::size_t>(i)] = noise.normal_at(static_cast<std::uint64_t>(i));
    auto result = flow_sample<double>(
        config_, std::span<const double>(params_.data(), static_cast<std::size_t>(params_.size())),
        std::span<const double>(z));
    Eigen::VectorXd theta(config_.dim);
    for (int i = 0; i < config_.dim; ++i) theta[i] = result.theta[static_cast<std::size_t>(i)];
    return {std::move(theta), result.log_density};
}

TracedValue MaskedAutoregressiveFlow::log_prob_traced(Tape&, const Instantiated& inst,
                                                      std::span<const double> theta) const {
    if (theta.size() != static_cast<std::size_t>(config_.dim)) {
        throw std::invalid_argument("MaskedAutoregressiveFlow::log_prob_traced: dim mismatch");
    }
    return flow_log_prob<TracedValue>(config_, std::span<const TracedValue>(inst.params), theta);
}

double MaskedAutoregressiveFlow::log_prob(std::span<const double> theta) const {
    if (theta.size() != static_cast<std::size_t>(config_.dim)) {
        throw std::invalid_argument("MaskedAutoregressiveFlow::log_prob: dim mismatch");
    }
    return flow_log_prob<double>(
        config_, std::span<const double>(params_.data(), static_cast<std::size_t>(params_.size())),
        theta);
}

nlohmann::json MaskedAutoregressiveFlow::to_json() const {
    return nlohmann::json{
        {"family", "masked_flow"},
        {"dim", config_.dim},
        {"layers", config_.layers},
        {"hidden", config_.hidden},
        {"parameters", std::vector<double>(params_.data(), params_.data() + params_.size())}};
}

}  // namespace diffabm

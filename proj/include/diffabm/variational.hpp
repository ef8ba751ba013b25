#pragma once

#include <Eigen/Core>
#include <memory>
#include <span>
#include <vector>

#include <json.hpp>

#include "diffabm/rng.hpp"
#include "diffabm/tape.hpp"

namespace diffabm {

/// A reparameterisable variational distribution over R^d with trainable
/// parameters phi in R^F. Sampling draws base noise and transforms it
/// differentiably; the log-density of a drawn sample is accumulated along
/// the way. Noise is addressed by index on the provided stream, so the
/// traced and plain sampling paths produce identical values.
class VariationalFamily {
  public:
    /// Parameter leaves created on a tape, in flattened phi order.
    struct Instantiated {
        std::vector<TracedValue> params;
    };

    struct TracedSample {
        std::vector<TracedValue> theta;
        TracedValue log_density;
    };

    virtual ~VariationalFamily() = default;

    virtual int dim() const = 0;
    virtual int param_count() const = 0;
    virtual Eigen::VectorXd parameters() const = 0;
    virtual void set_parameters(const Eigen::VectorXd& phi) = 0;
    virtual std::unique_ptr<VariationalFamily> clone() const = 0;

    Instantiated instantiate(Tape& tape) const;

    /// Reparameterised sample with full gradient path to the parameter
    /// leaves, plus the log-density of the sample under the family.
    virtual TracedSample sample_traced(Tape& tape, const Instantiated& inst,
                                       const RngStream& noise) const = 0;

    /// Same transform on plain doubles (identical noise mapping).
    virtual Eigen::VectorXd sample_values(const RngStream& noise) const = 0;

    /// log q_phi(theta) for a fixed point theta, differentiable in phi.
    virtual TracedValue log_prob_traced(Tape& tape, const Instantiated& inst,
                                        std::span<const double> theta) const = 0;

    virtual bool has_closed_form_kl() const { return false; }
    virtual TracedValue kl_to_std_normal_traced(Tape& tape, const Instantiated& inst) const;

    virtual nlohmann::json to_json() const = 0;
    static std::unique_ptr<VariationalFamily> from_json(const nlohmann::json& j);
};

/// Independent Gaussian per dimension, parameterised as (mu, log sigma).
class DiagonalGaussian final : public VariationalFamily {
  public:
    explicit DiagonalGaussian(int dim);
    DiagonalGaussian(Eigen::VectorXd mu, Eigen::VectorXd log_sigma);

    int dim() const override { return static_cast<int>(mu_.size()); }
    int param_count() const override { return 2 * dim(); }
    Eigen::VectorXd parameters() const override;
    void set_parameters(const Eigen::VectorXd& phi) override;
    std::unique_ptr<VariationalFamily> clone() const override;

    TracedSample sample_traced(Tape& tape, const Instantiated& inst,
                               const RngStream& noise) const override;
    Eigen::VectorXd sample_values(const RngStream& noise) const override;
    TracedValue log_prob_traced(Tape& tape, const Instantiated& inst,
                                std::span<const double> theta) const override;

    bool has_closed_form_kl() const override { return true; }
    TracedValue kl_to_std_normal_traced(Tape& tape, const Instantiated& inst) const override;

    /// KL(q || N(0, I)) in closed form; per dimension
    /// 0.5 (mu^2 + sigma^2 - 1) - log sigma.
    double kl_to_std_normal() const;

    const Eigen::VectorXd& mu() const { return mu_; }
    const Eigen::VectorXd& log_sigma() const { return log_sigma_; }

    nlohmann::json to_json() const override;

  private:
    Eigen::VectorXd mu_;
    Eigen::VectorXd log_sigma_;
};

/// Stack of masked affine autoregressive transformations applied in the
/// direction that makes sampling a single forward pass; density evaluation
/// of external points inverts the stack dimension by dimension. Each layer
/// is a MADE-style masked network with two hidden blocks whose outputs are
/// a shift and a softplus-positive scale; dimensions are reversed between
/// layers. With zero-initialised output heads the flow starts at the
/// identity, so the initial distribution is the standard normal base.
class MaskedAutoregressiveFlow final : public VariationalFamily {
  public:
    struct Config {
        int dim = 4;
        int layers = 16;
        int hidden = 20;
    };

    MaskedAutoregressiveFlow(const Config& config, RngStream init_rng);

    int dim() const override { return config_.dim; }
    int param_count() const override { return static_cast<int>(params_.size()); }
    Eigen::VectorXd parameters() const override { return params_; }
    void set_parameters(const Eigen::VectorXd& phi) override;
    std::unique_ptr<VariationalFamily> clone() const override;

    TracedSample sample_traced(Tape& tape, const Instantiated& inst,
                               const RngStream& noise) const override;
    Eigen::VectorXd sample_values(const RngStream& noise) const override;
    TracedValue log_prob_traced(Tape& tape, const Instantiated& inst,
                                std::span<const double> theta) const override;

    /// Plain-double log-density of an external point (same arithmetic as
    /// the traced path).
    double log_prob(std::span<const double> theta) const;

    /// Plain-double sample with its log-density from the sampling path.
    std::pair<Eigen::VectorXd, double> sample_with_log_density(const RngStream& noise) const;

    const Config& config() const { return config_; }

    nlohmann::json to_json() const override;

  private:
    Config config_;
    Eigen::VectorXd params_;
};

}  // namespace diffabm

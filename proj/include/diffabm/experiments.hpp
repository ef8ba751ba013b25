#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffabm/bh.hpp"
#include "diffabm/epi.hpp"
#include "diffabm/population.hpp"
#include "diffabm/train.hpp"

namespace diffabm {

/// Invalid configuration; carries the offending field path.
class ConfigError : public std::runtime_error {
  public:
    ConfigError(std::string field, const std::string& message)
        : std::runtime_error("config error: field '" + field + "': " + message),
          field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

  private:
    std::string field_;
};

enum class ExperimentKind { bh_calibrate, epi_calibrate, grad_variance, memory_profile };

std::string experiment_kind_name(ExperimentKind kind);

struct BhSettings {
    BhParams true_params{0.9, 0.9, 0.2, -0.2};
    BhAux aux;  // T = 100, R = 1.01, beta = 120, sigma = 0.04
    std::string family = "flow";
    MaskedAutoregressiveFlow::Config flow{4, 16, 20};
    int posterior_samples = 10000;
};

struct EpiSettings {
    PopulationConfig population;
    EpiConfig epi;
    EpiParams true_params = epi_ground_truth_params();
    MaskedAutoregressiveFlow::Config flow{kEpiThetaDim, 16, 20};
    int trajectory_runs = 50;
    int posterior_samples = 10000;
};

struct VarianceSettings {
    std::vector<int> horizons{0, 1, 2, 100};
    int repetitions = 100;
    int n_per_estimate = 5;
    int reference_samples = 1000;
    Eigen::VectorXd phi_mu;
    Eigen::VectorXd phi_log_sigma;
};

struct ProfileSettings {
    std::vector<int> agents{1000, 2000, 4000};
    std::vector<int> days{10, 20, 40};
    double seed_fraction = 0.05;  // keeps every group active from day 1
    int max_agents = 100000;      // desk-scale guard
};

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::bh_calibrate;
    std::uint64_t seed = 0;
    std::filesystem::path output_dir;
    TrainConfig train;
    BhSettings bh;
    EpiSettings epi;
    VarianceSettings variance;
    ProfileSettings profile;
    nlohmann::json resolved;  // canonical echo written to the manifest
};

/// CLI flag overrides; flags take precedence over config-file fields.
struct ConfigOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> output_dir;
    std::optional<std::string> estimator;
    std::optional<int> horizon;
};

ExperimentConfig parse_experiment_config(const nlohmann::json& j,
                                         const ConfigOverrides& overrides = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& file,
                                        const ConfigOverrides& overrides = {});

// ---------------------------------------------------------------------------
// Runner results (also consumed by the acceptance suite).

struct BhCalibrationResult {
    std::vector<EpochRecord> log;
    double final_loss_ma10 = 0.0;  // mean loss term over the last 10 epochs
    Eigen::VectorXd posterior_medians;
    std::vector<double> observed;
};

struct VarianceResult {
    std::vector<std::string> estimators;   // "H=0", "H=1", "H=2", "H=100", "score"
    std::vector<Eigen::MatrixXd> samples;  // per estimator: repetitions x F
    Eigen::VectorXd reference_mean;        // score-based, N = reference_samples
    Eigen::VectorXd reference_stddev;
    int reference_n = 0;
};

struct TrajectoryFan {
    std::string source;          // prior | untrained | trained
    Eigen::MatrixXd cumulative;  // runs x (days + 1)
};

struct EpiCalibrationResult {
    std::vector<EpochRecord> log;
    std::vector<double> ground_truth_cumulative;  // days 0..T
    std::vector<TrajectoryFan> fans;
    int plateau_epoch = -1;  // first epoch with MA10 relative change < 1% over 50 epochs
};

struct ProfilePoint {
    int agents = 0;
    int steps = 0;
    std::string mode;  // forward | reverse
    std::size_t node_count = 0;
    std::size_t peak_live = 0;
    double wall_ms = 0.0;
    std::string status;  // ok | oom
};

struct ProfileResult {
    std::vector<ProfilePoint> points;
    double slope = 0.0;      // nodes per agent-step (reverse mode)
    double intercept = 0.0;
    double r_squared = 0.0;
};

BhCalibrationResult run_bh_calibration(const ExperimentConfig& config);
VarianceResult run_gradient_variance(const ExperimentConfig& config);
EpiCalibrationResult run_epi_calibration(const ExperimentConfig& config);
ProfileResult run_memory_profile(const ExperimentConfig& config);

/// Dispatches to the matching runner, writing all artifacts plus the
/// manifest. Returns the process exit status (0 on success).
int run_experiment(const ExperimentConfig& config);

// Helpers shared with the acceptance suite.

/// Fraction of reference points lying inside the [lo, hi] pointwise
/// quantile envelope of the fan's runs.
double envelope_coverage(const TrajectoryFan& fan, std::span<const double> reference, double lo,
                         double hi);

/// Width of the [lo, hi] quantile envelope at the final day.
double envelope_final_width(const TrajectoryFan& fan, double lo, double hi);

/// First epoch at which the trailing-10 moving average of the loss term
/// changed by less than `tolerance` (relative) over the preceding `window`
/// epochs; -1 if never.
int plateau_epoch(const std::vector<EpochRecord>& log, int window, double tolerance);

}  // namespace diffabm

#include "diffabm/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <memory>
#include <new>

#include "diffabm/estimators.hpp"
#include "diffabm/gvi.hpp"
#include "diffabm/losses.hpp"
#include "diffabm/manifest.hpp"
#include "diffabm/serialize.hpp"
#include "diffabm/variational.hpp"

namespace diffabm {

namespace {

// Substream tags for the per-experiment random streams.
enum : std::uint64_t {
    kTagData = 1,
    kTagPopulation = 2,
    kTagFamilyInit = 3,
    kTagTrain = 4,
    kTagPosterior = 5,
    kTagFan = 6,
    kTagProfile = 7,
    kTagVariance = 8,
    kTagReference = 9,
};

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

template <class T>
T json_get(const nlohmann::json& j, const std::string& field, const T& fallback) {
    if (!j.contains(field)) return fallback;
    try {
        return j.at(field).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(field, e.what());
    }
}

int parse_horizon(const nlohmann::json& j, const std::string& field) {
    if (j.is_string()) {
        if (j.get<std::string>() == "full") return kFullHorizon;
        throw ConfigError(field, "expected a non-negative integer or \"full\"");
    }
    if (!j.is_number_integer() || j.get<int>() < 0) {
        throw ConfigError(field, "expected a non-negative integer or \"full\"");
    }
    return j.get<int>();
}

nlohmann::json horizon_to_json(int horizon) {
    if (horizon == kFullHorizon) return "full";
    return horizon;
}

GsMode gs_mode_from_name(const std::string& name, const std::string& field) {
    if (name == "soft") return GsMode::soft;
    if (name == "straight_through") return GsMode::straight_through;
    throw ConfigError(field, "unknown mode '" + name + "'; expected soft or straight_through");
}

std::string gs_mode_name(GsMode mode) {
    return mode == GsMode::soft ? "soft" : "straight_through";
}

// Fully resolved echo of the configuration, written to the manifest.
nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json train{{"epochs", c.train.epochs},
                         {"estimator", estimator_name(c.train.estimator)},
                         {"horizon", horizon_to_json(c.train.horizon)},
                         {"n_samples", c.train.gvi.n_samples},
                         {"w", c.train.gvi.w},
                         {"learning_rate", c.train.adamw.learning_rate},
                         {"beta1", c.train.adamw.beta1},
                         {"beta2", c.train.adamw.beta2},
                         {"epsilon", c.train.adamw.epsilon},
                         {"weight_decay", c.train.adamw.weight_decay},
                         {"threads", c.train.threads}};
    nlohmann::json bh{{"true_params",
                       {c.bh.true_params.g2, c.bh.true_params.g3, c.bh.true_params.b2,
                        c.bh.true_params.b3}},
                      {"steps", c.bh.aux.steps},
                      {"gross_return", c.bh.aux.gross_return},
                      {"choice_intensity", c.bh.aux.choice_intensity},
                      {"noise_scale", c.bh.aux.noise_scale},
                      {"strategies", c.bh.aux.strategies},
                      {"family", c.bh.family},
                      {"flow", {{"layers", c.bh.flow.layers}, {"hidden", c.bh.flow.hidden}}},
                      {"posterior_samples", c.bh.posterior_samples}};
    nlohmann::json groups;
    for (int lt = 0; lt < kLocationTypes; ++lt) {
        if (lt == static_cast<int>(LocationType::household)) continue;
        const auto& g = c.epi.population.groups[static_cast<std::size_t>(lt)];
        groups[location_type_name(static_cast<LocationType>(lt))] = {
            {"participation", g.participation}, {"mean_size", g.mean_size}};
    }
    nlohmann::json epi{{"agents", c.epi.population.agents},
                       {"days", c.epi.epi.days},
                       {"gs_temperature", c.epi.epi.gs_temperature},
                       {"infectious_days", c.epi.epi.infectious_days},
                       {"interaction_time", c.epi.epi.interaction_time},
                       {"mode", gs_mode_name(c.epi.epi.mode)},
                       {"true_params", epi_params_to_json(c.epi.true_params)},
                       {"population",
                        {{"household_mean_size", c.epi.population.household_mean_size},
                         {"household_max_size", c.epi.population.household_max_size},
                         {"susceptibility", c.epi.population.susceptibility},
                         {"groups", groups}}},
                       {"flow", {{"layers", c.epi.flow.layers}, {"hidden", c.epi.flow.hidden}}},
                       {"trajectory_runs", c.epi.trajectory_runs},
                       {"posterior_samples", c.epi.posterior_samples}};
    nlohmann::json variance{
        {"horizons", c.variance.horizons},
        {"repetitions", c.variance.repetitions},
        {"n_per_estimate", c.variance.n_per_estimate},
        {"reference_samples", c.variance.reference_samples},
        {"phi_mu",
         std::vector<double>(c.variance.phi_mu.data(),
                             c.variance.phi_mu.data() + c.variance.phi_mu.size())},
        {"phi_log_sigma",
         std::vector<double>(c.variance.phi_log_sigma.data(),
                             c.variance.phi_log_sigma.data() + c.variance.phi_log_sigma.size())}};
    nlohmann::json profile{{"agents", c.profile.agents},
                           {"days", c.profile.days},
                           {"seed_fraction", c.profile.seed_fraction},
                           {"max_agents", c.profile.max_agents}};
    return nlohmann::json{{"experiment", experiment_kind_name(c.kind)},
                          {"seed", c.seed},
                          {"output_dir", c.output_dir.string()},
                          {"train", train},
                          {"bh", bh},
                          {"epi", epi},
                          {"variance", variance},
                          {"profile", profile}};
}

std::unique_ptr<VariationalFamily> make_bh_family(const BhSettings& settings,
                                                  const RngStream& init) {
    if (settings.family == "gaussian") return std::make_unique<DiagonalGaussian>(4);
    MaskedAutoregressiveFlow::Config cfg = settings.flow;
    cfg.dim = 4;
    return std::make_unique<MaskedAutoregressiveFlow>(cfg, init);
}

struct RunnerIo {
    std::filesystem::path dir;
    std::vector<std::string> outputs;

    explicit RunnerIo(const std::filesystem::path& d) : dir(d) {
        std::filesystem::create_directories(dir);
    }

    void csv(const std::string& name, const CsvTable& table) {
        write_csv(dir / name, table);
        outputs.push_back(name);
    }

    void json(const std::string& name, const nlohmann::json& j) {
        write_text_file(dir / name, j.dump(2) + "\n");
        outputs.push_back(name);
    }
};

void write_training_csvs(RunnerIo& io, const std::vector<EpochRecord>& log) {
    std::vector<double> objective, loss_term;
    objective.reserve(log.size());
    loss_term.reserve(log.size());
    for (const auto& r : log) {
        objective.push_back(r.objective);
        loss_term.push_back(r.loss_term);
    }
    const auto obj_ma = moving_average(objective, 10);
    const auto loss_ma = moving_average(loss_term, 10);

    CsvTable curve;
    curve.header = {"epoch", "objective", "loss_term", "kl_term", "objective_ma10",
                    "loss_term_ma10"};
    CsvTable timing;
    timing.header = {"epoch", "wall_ms"};
    for (std::size_t i = 0; i < log.size(); ++i) {
        curve.rows.push_back({std::to_string(log[i].epoch), format_double(log[i].objective),
                              format_double(log[i].loss_term), format_double(log[i].kl_term),
                              format_double(obj_ma[i]), format_double(loss_ma[i])});
        timing.rows.push_back({std::to_string(log[i].epoch), format_double(log[i].wall_ms)});
    }
    io.csv("loss_curve.csv", curve);
    // timing.csv is machine-dependent and excluded from the determinism gate.
    io.csv("timing.csv", timing);
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("quantile: empty sample");
    std::sort(values.begin(), values.end());
    const double pos = q * double(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = static_cast<std::size_t>(std::ceil(pos));
    const double frac = pos - double(lo);
    return values[lo] * (1.0 - frac) + values[hi] * frac;
}

double median_of(std::vector<double> values) { return quantile(std::move(values), 0.5); }

}  // namespace

std::string experiment_kind_name(ExperimentKind kind) {
    switch (kind) {
        case ExperimentKind::bh_calibrate: return "bh-calibrate";
        case ExperimentKind::epi_calibrate: return "epi-calibrate";
        case ExperimentKind::grad_variance: return "grad-variance";
        case ExperimentKind::memory_profile: return "memory-profile";
    }
    throw std::logic_error("experiment_kind_name: unknown kind");
}

ExperimentConfig parse_experiment_config(const nlohmann::json& j,
                                         const ConfigOverrides& overrides) {
    ExperimentConfig c;

    const std::string kind = json_get<std::string>(j, "experiment", "");
    if (kind == "bh-calibrate") {
        c.kind = ExperimentKind::bh_calibrate;
    } else if (kind == "epi-calibrate") {
        c.kind = ExperimentKind::epi_calibrate;
    } else if (kind == "grad-variance") {
        c.kind = ExperimentKind::grad_variance;
    } else if (kind == "memory-profile") {
        c.kind = ExperimentKind::memory_profile;
    } else {
        throw ConfigError("experiment",
                          "unknown kind '" + kind +
                              "'; expected bh-calibrate, epi-calibrate, grad-variance or "
                              "memory-profile");
    }

    if (overrides.seed) {
        c.seed = *overrides.seed;
    } else if (j.contains("seed")) {
        if (!j.at("seed").is_number_unsigned() && !j.at("seed").is_number_integer()) {
            throw ConfigError("seed", "expected an integer");
        }
        c.seed = j.at("seed").get<std::uint64_t>();
    } else {
        throw ConfigError("seed", "required; the harness never seeds from the clock");
    }

    std::string out = json_get<std::string>(j, "output_dir", "");
    if (overrides.output_dir) out = *overrides.output_dir;
    if (out.empty()) throw ConfigError("output_dir", "required");
    c.output_dir = out;

    // Defaults per experiment kind before reading the train block.
    if (c.kind == ExperimentKind::epi_calibrate) {
        c.train.estimator = EstimatorKind::hybrid;
        c.train.epochs = 600;
    }

    if (j.contains("train")) {
        const auto& t = j.at("train");
        c.train.epochs = json_get<int>(t, "epochs", c.train.epochs);
        if (t.contains("estimator")) {
            try {
                c.train.estimator = estimator_from_name(t.at("estimator").get<std::string>());
            } catch (const std::invalid_argument& e) {
                throw ConfigError("train.estimator", e.what());
            }
        }
        if (t.contains("horizon")) c.train.horizon = parse_horizon(t.at("horizon"), "train.horizon");
        c.train.gvi.n_samples = json_get<int>(t, "n_samples", c.train.gvi.n_samples);
        c.train.gvi.w = json_get<double>(t, "w", c.train.gvi.w);
        c.train.adamw.learning_rate =
            json_get<double>(t, "learning_rate", c.train.adamw.learning_rate);
        c.train.adamw.beta1 = json_get<double>(t, "beta1", c.train.adamw.beta1);
        c.train.adamw.beta2 = json_get<double>(t, "beta2", c.train.adamw.beta2);
        c.train.adamw.epsilon = json_get<double>(t, "epsilon", c.train.adamw.epsilon);
        c.train.adamw.weight_decay =
            json_get<double>(t, "weight_decay", c.train.adamw.weight_decay);
        c.train.threads = json_get<int>(t, "threads", c.train.threads);
    }
    if (overrides.estimator) {
        try {
            c.train.estimator = estimator_from_name(*overrides.estimator);
        } catch (const std::invalid_argument& e) {
            throw ConfigError("--estimator", e.what());
        }
    }
    if (overrides.horizon) {
        if (*overrides.horizon < 0) throw ConfigError("--horizon", "must be non-negative");
        c.train.horizon = *overrides.horizon;
    }
    try {
        c.train.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("train", e.what());
    }

    if (j.contains("bh")) {
        const auto& b = j.at("bh");
        if (b.contains("true_params")) {
            const auto v = b.at("true_params").get<std::vector<double>>();
            if (v.size() != 4) throw ConfigError("bh.true_params", "expected 4 values");
            c.bh.true_params = {v[0], v[1], v[2], v[3]};
        }
        c.bh.aux.steps = json_get<int>(b, "steps", c.bh.aux.steps);
        c.bh.aux.gross_return = json_get<double>(b, "gross_return", c.bh.aux.gross_return);
        c.bh.aux.choice_intensity =
            json_get<double>(b, "choice_intensity", c.bh.aux.choice_intensity);
        c.bh.aux.noise_scale = json_get<double>(b, "noise_scale", c.bh.aux.noise_scale);
        c.bh.family = json_get<std::string>(b, "family", c.bh.family);
        if (c.bh.family != "flow" && c.bh.family != "gaussian") {
            throw ConfigError("bh.family", "expected flow or gaussian");
        }
        if (b.contains("flow")) {
            c.bh.flow.layers = json_get<int>(b.at("flow"), "layers", c.bh.flow.layers);
            c.bh.flow.hidden = json_get<int>(b.at("flow"), "hidden", c.bh.flow.hidden);
        }
        c.bh.posterior_samples = json_get<int>(b, "posterior_samples", c.bh.posterior_samples);
        try {
            c.bh.aux.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError("bh", e.what());
        }
    }

    if (j.contains("epi")) {
        const auto& e = j.at("epi");
        c.epi.population.agents = json_get<int>(e, "agents", c.epi.population.agents);
        c.epi.epi.days = json_get<int>(e, "days", c.epi.epi.days);
        c.epi.epi.gs_temperature = json_get<double>(e, "gs_temperature", c.epi.epi.gs_temperature);
        c.epi.epi.infectious_days = json_get<int>(e, "infectious_days", c.epi.epi.infectious_days);
        c.epi.epi.interaction_time =
            json_get<double>(e, "interaction_time", c.epi.epi.interaction_time);
        if (e.contains("mode")) {
            c.epi.epi.mode = gs_mode_from_name(e.at("mode").get<std::string>(), "epi.mode");
        }
        if (e.contains("true_params")) {
            try {
                c.epi.true_params = epi_params_from_json(e.at("true_params"));
            } catch (const std::exception& ex) {
                throw ConfigError("epi.true_params", ex.what());
            }
        }
        if (e.contains("population")) {
            const auto& p = e.at("population");
            c.epi.population.household_mean_size =
                json_get<double>(p, "household_mean_size", c.epi.population.household_mean_size);
            c.epi.population.household_max_size =
                json_get<int>(p, "household_max_size", c.epi.population.household_max_size);
            c.epi.population.susceptibility =
                json_get<double>(p, "susceptibility", c.epi.population.susceptibility);
            if (p.contains("groups")) {
                for (const auto& [name, g] : p.at("groups").items()) {
                    LocationType lt;
                    try {
                        lt = location_type_from_name(name);
                    } catch (const std::invalid_argument& ex) {
                        throw ConfigError("epi.population.groups", ex.what());
                    }
                    auto& dst = c.epi.population.groups[static_cast<std::size_t>(lt)];
                    dst.participation = json_get<double>(g, "participation", dst.participation);
                    dst.mean_size = json_get<double>(g, "mean_size", dst.mean_size);
                }
            }
        }
        if (e.contains("flow")) {
            c.epi.flow.layers = json_get<int>(e.at("flow"), "layers", c.epi.flow.layers);
            c.epi.flow.hidden = json_get<int>(e.at("flow"), "hidden", c.epi.flow.hidden);
        }
        c.epi.trajectory_runs = json_get<int>(e, "trajectory_runs", c.epi.trajectory_runs);
        c.epi.posterior_samples = json_get<int>(e, "posterior_samples", c.epi.posterior_samples);
        try {
            c.epi.population.validate();
            c.epi.epi.validate();
        } catch (const std::invalid_argument& ex) {
            throw ConfigError("epi", ex.what());
        }
    }

    if (j.contains("variance")) {
        const auto& v = j.at("variance");
        c.variance.horizons = json_get<std::vector<int>>(v, "horizons", c.variance.horizons);
        c.variance.repetitions = json_get<int>(v, "repetitions", c.variance.repetitions);
        c.variance.n_per_estimate = json_get<int>(v, "n_per_estimate", c.variance.n_per_estimate);
        c.variance.reference_samples =
            json_get<int>(v, "reference_samples", c.variance.reference_samples);
        if (v.contains("phi_mu")) {
            const auto m = v.at("phi_mu").get<std::vector<double>>();
            c.variance.phi_mu = Eigen::Map<const Eigen::VectorXd>(m.data(),
                                                                  static_cast<Eigen::Index>(m.size()));
        }
        if (v.contains("phi_log_sigma")) {
            const auto s = v.at("phi_log_sigma").get<std::vector<double>>();
            c.variance.phi_log_sigma =
                Eigen::Map<const Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(s.size()));
        }
    }
    if (c.variance.phi_mu.size() == 0) {
        c.variance.phi_mu = Eigen::VectorXd(4);
        c.variance.phi_mu << 0.5, 0.5, 0.1, -0.1;
    }
    if (c.variance.phi_log_sigma.size() == 0) {
        c.variance.phi_log_sigma = Eigen::VectorXd::Constant(4, std::log(0.25));
    }
    if (c.variance.phi_mu.size() != 4 || c.variance.phi_log_sigma.size() != 4) {
        throw ConfigError("variance.phi_mu", "expected 4 components");
    }
    for (int h : c.variance.horizons) {
        if (h < 0) throw ConfigError("variance.horizons", "horizons must be non-negative");
    }
    if (c.variance.repetitions < 2) {
        throw ConfigError("variance.repetitions", "need at least 2 repetitions");
    }

    if (j.contains("profile")) {
        const auto& p = j.at("profile");
        c.profile.agents = json_get<std::vector<int>>(p, "agents", c.profile.agents);
        c.profile.days = json_get<std::vector<int>>(p, "days", c.profile.days);
        c.profile.seed_fraction = json_get<double>(p, "seed_fraction", c.profile.seed_fraction);
        c.profile.max_agents = json_get<int>(p, "max_agents", c.profile.max_agents);
    }
    for (int a : c.profile.agents) {
        if (a < 1) throw ConfigError("profile.agents", "agent counts must be >= 1");
    }
    for (int d : c.profile.days) {
        if (d < 1) throw ConfigError("profile.days", "day counts must be >= 1");
    }
    if (!(c.profile.seed_fraction > 0.0 && c.profile.seed_fraction < 1.0)) {
        throw ConfigError("profile.seed_fraction", "must be in (0, 1)");
    }

    if (c.kind == ExperimentKind::epi_calibrate &&
        c.epi.population.agents > c.profile.max_agents) {
        throw ConfigError("epi.agents", "exceeds the desk-scale guard of " +
                                            std::to_string(c.profile.max_agents) +
                                            " agents (profile.max_agents)");
    }

    c.resolved = config_to_json(c);
    return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& file,
                                        const ConfigOverrides& overrides) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot read config file: " + file.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("config parse error in " + file.string() + ": " + e.what());
    }
    return parse_experiment_config(j, overrides);
}

// ---------------------------------------------------------------------------
// Runners

BhCalibrationResult run_bh_calibration(const ExperimentConfig& config) {
    RunnerIo io(config.output_dir);
    const RngStream root(config.seed);

    BhCalibrationResult result;
    result.observed =
        bh_ground_truth_prices(config.bh.true_params, config.bh.aux, root.substream(kTagData));
    CsvTable gt;
    gt.header = {"step", "price"};
    for (std::size_t t = 0; t < result.observed.size(); ++t) {
        gt.rows.push_back({std::to_string(t + 1), format_double(result.observed[t])});
    }
    io.csv("ground_truth.csv", gt);

    BhMmdLoss loss(result.observed, config.bh.aux);
    auto family = make_bh_family(config.bh, root.substream(kTagFamilyInit));
    result.log = train(*family, loss, config.train, root.substream(kTagTrain));
    write_training_csvs(io, result.log);

    if (!result.log.empty()) {
        const std::size_t window = std::min<std::size_t>(10, result.log.size());
        double acc = 0.0;
        for (std::size_t i = result.log.size() - window; i < result.log.size(); ++i) {
            acc += result.log[i].loss_term;
        }
        result.final_loss_ma10 = acc / double(window);
    }

    const RngStream posterior_rng = root.substream(kTagPosterior);
    Eigen::MatrixXd samples(config.bh.posterior_samples, 4);
    CsvTable post;
    post.header = {"sample", "g2", "g3", "b2", "b3"};
    for (int s = 0; s < config.bh.posterior_samples; ++s) {
        const Eigen::VectorXd theta =
            family->sample_values(posterior_rng.substream(static_cast<std::uint64_t>(s)));
        samples.row(s) = theta.transpose();
        post.rows.push_back({std::to_string(s), format_double(theta[0]), format_double(theta[1]),
                             format_double(theta[2]), format_double(theta[3])});
    }
    io.csv("posterior_samples.csv", post);
    result.posterior_medians = Eigen::VectorXd(4);
    for (int i = 0; i < 4; ++i) {
        std::vector<double> col(samples.col(i).data(), samples.col(i).data() + samples.rows());
        result.posterior_medians[i] = median_of(std::move(col));
    }
    io.json("family.json", family->to_json());
    write_manifest(config.output_dir, config.resolved, config.seed, io.outputs);
    return result;
}

VarianceResult run_gradient_variance(const ExperimentConfig& config) {
    RunnerIo io(config.output_dir);
    const RngStream root(config.seed);

    const std::vector<double> observed =
        bh_ground_truth_prices(config.bh.true_params, config.bh.aux, root.substream(kTagData));
    BhMmdLoss loss(observed, config.bh.aux);
    DiagonalGaussian q(config.variance.phi_mu, config.variance.phi_log_sigma);
    const int f_dim = q.param_count();

    VarianceResult result;
    for (int h : config.variance.horizons) result.estimators.push_back("H=" + std::to_string(h));
    result.estimators.push_back("score");
    result.samples.assign(result.estimators.size(),
                          Eigen::MatrixXd(config.variance.repetitions, f_dim));

    const RngStream var_rng = root.substream(kTagVariance);
    for (int rep = 0; rep < config.variance.repetitions; ++rep) {
        // One common-random-numbers stream per repetition, shared by every
        // estimator.
        const RngStream rep_rng = var_rng.substream(static_cast<std::uint64_t>(rep));
        for (std::size_t e = 0; e < config.variance.horizons.size(); ++e) {
            auto est = pathwise_gradient(q, loss, config.variance.horizons[e],
                                         config.variance.n_per_estimate, rep_rng,
                                         config.train.threads);
            result.samples[e].row(rep) = est.mean.transpose();
        }
        auto est = score_gradient(q, loss, config.variance.n_per_estimate, rep_rng,
                                  config.train.threads);
        result.samples.back().row(rep) = est.mean.transpose();
    }

    auto reference = score_gradient(q, loss, config.variance.reference_samples,
                                    root.substream(kTagReference), config.train.threads);
    result.reference_mean = reference.mean;
    result.reference_stddev = reference.stddev;
    result.reference_n = reference.n_samples;

    CsvTable summary;
    summary.header = {"estimator", "component", "mean", "std"};
    CsvTable samples_csv;
    samples_csv.header = {"estimator", "repetition", "component", "value"};
    for (std::size_t e = 0; e < result.estimators.size(); ++e) {
        const Eigen::MatrixXd& m = result.samples[e];
        for (int c = 0; c < f_dim; ++c) {
            const double mean = m.col(c).mean();
            const double sq = (m.col(c).array() - mean).square().sum();
            const double std = std::sqrt(sq / double(m.rows() - 1));
            summary.rows.push_back({result.estimators[e], std::to_string(c),
                                    format_double(mean), format_double(std)});
            for (int r = 0; r < m.rows(); ++r) {
                samples_csv.rows.push_back({result.estimators[e], std::to_string(r),
                                            std::to_string(c), format_double(m(r, c))});
            }
        }
    }
    io.csv("grad_variance_summary.csv", summary);
    io.csv("grad_variance_samples.csv", samples_csv);

    CsvTable ref;
    ref.header = {"component", "mean", "stddev", "n"};
    for (int c = 0; c < f_dim; ++c) {
        ref.rows.push_back({std::to_string(c), format_double(result.reference_mean[c]),
                            format_double(result.reference_stddev[c]),
                            std::to_string(result.reference_n)});
    }
    io.csv("grad_variance_reference.csv", ref);
    write_manifest(config.output_dir, config.resolved, config.seed, io.outputs);
    return result;
}

EpiCalibrationResult run_epi_calibration(const ExperimentConfig& config) {
    RunnerIo io(config.output_dir);
    const RngStream root(config.seed);

    auto population = std::make_shared<Population>(
        synth_population(config.epi.population, root.substream(kTagPopulation)));
    io.json("population.json", population_to_json(*population));

    EpiCalibrationResult result;
    auto truth_run = epi_simulate(config.epi.true_params, *population, config.epi.epi,
                                  root.substream(kTagData));
    result.ground_truth_cumulative = truth_run.cumulative;
    CsvTable gt;
    gt.header = {"day", "new_infections", "cumulative"};
    gt.rows.push_back({"0", format_double(0.0), format_double(truth_run.cumulative[0])});
    for (std::size_t t = 0; t < truth_run.daily_new.size(); ++t) {
        gt.rows.push_back({std::to_string(t + 1), format_double(truth_run.daily_new[t]),
                           format_double(truth_run.cumulative[t + 1])});
    }
    io.csv("ground_truth.csv", gt);

    EpiCalibrationLoss loss(population, config.epi.epi, truth_run.daily_new);
    MaskedAutoregressiveFlow::Config flow_cfg = config.epi.flow;
    flow_cfg.dim = kEpiThetaDim;
    MaskedAutoregressiveFlow flow(flow_cfg, root.substream(kTagFamilyInit));
    auto untrained = flow.clone();
    io.json("family_untrained.json", untrained->to_json());

    result.log = train(flow, loss, config.train, root.substream(kTagTrain));
    write_training_csvs(io, result.log);
    result.plateau_epoch = plateau_epoch(result.log, 50, 0.01);

    // Trajectory fans: cumulative-infection runs from parameters sampled
    // from the prior, the untrained flow and the trained flow.
    const RngStream fan_rng = root.substream(kTagFan);
    CsvTable fan_csv;
    fan_csv.header = {"source", "run", "day", "cumulative"};
    const char* source_names[3] = {"prior", "untrained", "trained"};
    for (int src = 0; src < 3; ++src) {
        TrajectoryFan fan;
        fan.source = source_names[src];
        fan.cumulative = Eigen::MatrixXd(config.epi.trajectory_runs, config.epi.epi.days + 1);
        const RngStream src_rng = fan_rng.substream(static_cast<std::uint64_t>(src));
        for (int r = 0; r < config.epi.trajectory_runs; ++r) {
            const RngStream theta_rng = src_rng.substream(2 * static_cast<std::uint64_t>(r));
            const RngStream sim_rng = src_rng.substream(2 * static_cast<std::uint64_t>(r) + 1);
            Eigen::VectorXd theta(kEpiThetaDim);
            if (src == 0) {
                for (int i = 0; i < kEpiThetaDim; ++i) {
                    theta[i] = theta_rng.normal_at(static_cast<std::uint64_t>(i));
                }
            } else if (src == 1) {
                theta = untrained->sample_values(theta_rng);
            } else {
                theta = flow.sample_values(theta_rng);
            }
            EpiParams params = epi_constrain(
                std::span<const double>(theta.data(), static_cast<std::size_t>(theta.size())));
            auto run = epi_simulate(params, *population, config.epi.epi, sim_rng);
            for (int d = 0; d <= config.epi.epi.days; ++d) {
                fan.cumulative(r, d) = run.cumulative[static_cast<std::size_t>(d)];
                fan_csv.rows.push_back({fan.source, std::to_string(r), std::to_string(d),
                                        format_double(fan.cumulative(r, d))});
            }
        }
        result.fans.push_back(std::move(fan));
    }
    io.csv("trajectory_fan.csv", fan_csv);

    const RngStream posterior_rng = root.substream(kTagPosterior);
    CsvTable post;
    post.header = {"sample"};
    for (int i = 0; i < kCalibratedLocationTypes; ++i) {
        post.header.push_back(std::string("u_") +
                              location_type_name(static_cast<LocationType>(i)));
    }
    post.header.push_back("u_i0");
    for (int i = 0; i < kCalibratedLocationTypes; ++i) {
        post.header.push_back(std::string("beta_") +
                              location_type_name(static_cast<LocationType>(i)));
    }
    post.header.push_back("i0_fraction");
    for (int s = 0; s < config.epi.posterior_samples; ++s) {
        const Eigen::VectorXd theta =
            flow.sample_values(posterior_rng.substream(static_cast<std::uint64_t>(s)));
        EpiParams constrained = epi_constrain(
            std::span<const double>(theta.data(), static_cast<std::size_t>(theta.size())));
        std::vector<std::string> row{std::to_string(s)};
        for (int i = 0; i < kEpiThetaDim; ++i) row.push_back(format_double(theta[i]));
        for (int i = 0; i < kCalibratedLocationTypes; ++i) {
            row.push_back(format_double(constrained.contact_intensity[static_cast<std::size_t>(i)]));
        }
        row.push_back(format_double(constrained.initial_infected_fraction));
        post.rows.push_back(std::move(row));
    }
    io.csv("posterior_samples.csv", post);
    io.json("family.json", flow.to_json());
    write_manifest(config.output_dir, config.resolved, config.seed, io.outputs);
    return result;
}

ProfileResult run_memory_profile(const ExperimentConfig& config) {
    RunnerIo io(config.output_dir);
    const RngStream root(config.seed);

    ProfileResult result;
    EpiParams params = config.epi.true_params;
    params.initial_infected_fraction = config.profile.seed_fraction;

    for (std::size_t ai = 0; ai < config.profile.agents.size(); ++ai) {
        PopulationConfig pop_cfg = config.epi.population;
        pop_cfg.agents = config.profile.agents[ai];
        const Population population =
            synth_population(pop_cfg, root.substream(kTagPopulation).substream(ai));
        for (std::size_t di = 0; di < config.profile.days.size(); ++di) {
            EpiConfig epi_cfg = config.epi.epi;
            epi_cfg.days = config.profile.days[di];
            const RngStream sim_rng =
                root.substream(kTagData).substream(ai * 100 + di);

            ProfilePoint reverse;
            reverse.agents = pop_cfg.agents;
            reverse.steps = epi_cfg.days;
            reverse.mode = "reverse";
            try {
                const auto start = Clock::now();
                Tape tape;
                EpiParamsT<TracedValue> traced;
                for (int lt = 0; lt < kCalibratedLocationTypes; ++lt) {
                    traced.contact_intensity[static_cast<std::size_t>(lt)] = make_leaf(
                        tape, params.contact_intensity[static_cast<std::size_t>(lt)]);
                }
                traced.contact_intensity[static_cast<int>(LocationType::reserve)] =
                    TracedValue(0.0);
                traced.initial_infected_fraction =
                    make_leaf(tape, params.initial_infected_fraction);
                auto run = epi_simulate(traced, population, epi_cfg, sim_rng);
                auto adjoints = backward(tape, run.cumulative.back());
                (void)adjoints;
                reverse.node_count = tape.size();
                reverse.peak_live = tape.size();
                reverse.wall_ms = elapsed_ms(start);
                reverse.status = "ok";
            } catch (const std::bad_alloc&) {
                reverse.status = "oom";
            }
            result.points.push_back(reverse);

            ProfilePoint forward;
            forward.agents = pop_cfg.agents;
            forward.steps = epi_cfg.days;
            forward.mode = "forward";
            try {
                const auto start = Clock::now();
                EpiParamsT<Dual> dual;
                for (int lt = 0; lt < kCalibratedLocationTypes; ++lt) {
                    dual.contact_intensity[static_cast<std::size_t>(lt)] = Dual::seeded(
                        params.contact_intensity[static_cast<std::size_t>(lt)], kEpiThetaDim,
                        static_cast<std::uint32_t>(lt));
                }
                dual.contact_intensity[static_cast<int>(LocationType::reserve)] = Dual(0.0);
                dual.initial_infected_fraction = Dual::seeded(
                    params.initial_infected_fraction, kEpiThetaDim, kEpiThetaDim - 1);
                auto run = epi_simulate(dual, population, epi_cfg, sim_rng);
                (void)run;
                forward.node_count = 0;  // forward mode stores no graph
                // Live dual values: per-agent mass, load and the additions
                // window; independent of the step count.
                forward.peak_live = static_cast<std::size_t>(pop_cfg.agents) *
                                    static_cast<std::size_t>(epi_cfg.infectious_days + 2);
                forward.wall_ms = elapsed_ms(start);
                forward.status = "ok";
            } catch (const std::bad_alloc&) {
                forward.status = "oom";
            }
            result.points.push_back(forward);
        }
    }

    // Affine fit of reverse-mode node counts in agents x steps.
    {
        std::vector<double> x, y;
        for (const auto& p : result.points) {
            if (p.mode == "reverse" && p.status == "ok") {
                x.push_back(double(p.agents) * double(p.steps));
                y.push_back(double(p.node_count));
            }
        }
        if (x.size() >= 2) {
            const double n = double(x.size());
            double sx = 0, sy = 0, sxx = 0, sxy = 0;
            for (std::size_t i = 0; i < x.size(); ++i) {
                sx += x[i];
                sy += y[i];
                sxx += x[i] * x[i];
                sxy += x[i] * y[i];
            }
            const double denom = n * sxx - sx * sx;
            result.slope = (n * sxy - sx * sy) / denom;
            result.intercept = (sy - result.slope * sx) / n;
            double ss_res = 0, ss_tot = 0;
            const double ymean = sy / n;
            for (std::size_t i = 0; i < x.size(); ++i) {
                const double fit = result.intercept + result.slope * x[i];
                ss_res += (y[i] - fit) * (y[i] - fit);
                ss_tot += (y[i] - ymean) * (y[i] - ymean);
            }
            result.r_squared = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
        }
    }

    CsvTable table;
    table.header = {"agents", "steps", "mode", "node_count", "peak_live", "status"};
    CsvTable timing;
    timing.header = {"agents", "steps", "mode", "wall_ms"};
    for (const auto& p : result.points) {
        table.rows.push_back({std::to_string(p.agents), std::to_string(p.steps), p.mode,
                              std::to_string(p.node_count), std::to_string(p.peak_live),
                              p.status});
        timing.rows.push_back({std::to_string(p.agents), std::to_string(p.steps), p.mode,
                               format_double(p.wall_ms)});
    }
    io.csv("memory_profile.csv", table);
    io.csv("timing.csv", timing);
    io.json("profile_fit.json", nlohmann::json{{"slope", result.slope},
                                               {"intercept", result.intercept},
                                               {"r_squared", result.r_squared}});
    write_manifest(config.output_dir, config.resolved, config.seed, io.outputs);
    return result;
}

int run_experiment(const ExperimentConfig& config) {
    switch (config.kind) {
        case ExperimentKind::bh_calibrate:
            run_bh_calibration(config);
            return 0;
        case ExperimentKind::epi_calibrate:
            run_epi_calibration(config);
            return 0;
        case ExperimentKind::grad_variance:
            run_gradient_variance(config);
            return 0;
        case ExperimentKind::memory_profile:
            run_memory_profile(config);
            return 0;
    }
    return 2;
}

double envelope_coverage(const TrajectoryFan& fan, std::span<const double> reference, double lo,
                         double hi) {
    if (reference.size() != static_cast<std::size_t>(fan.cumulative.cols())) {
        throw std::invalid_argument("envelope_coverage: day-count mismatch");
    }
    int inside = 0;
    for (Eigen::Index d = 0; d < fan.cumulative.cols(); ++d) {
        std::vector<double> col(fan.cumulative.col(d).data(),
                                fan.cumulative.col(d).data() + fan.cumulative.rows());
        const double ql = quantile(col, lo);
        const double qh = quantile(col, hi);
        const double ref = reference[static_cast<std::size_t>(d)];
        if (ref >= ql && ref <= qh) ++inside;
    }
    return double(inside) / double(fan.cumulative.cols());
}

double envelope_final_width(const TrajectoryFan& fan, double lo, double hi) {
    std::vector<double> col(fan.cumulative.col(fan.cumulative.cols() - 1).data(),
                            fan.cumulative.col(fan.cumulative.cols() - 1).data() +
                                fan.cumulative.rows());
    return quantile(col, hi) - quantile(col, lo);
}

int plateau_epoch(const std::vector<EpochRecord>& log, int window, double tolerance) {
    if (log.size() <= static_cast<std::size_t>(window)) return -1;
    std::vector<double> loss_terms;
    loss_terms.reserve(log.size());
    for (const auto& r : log) loss_terms.push_back(r.loss_term);
    const auto ma = moving_average(loss_terms, 10);
    for (std::size_t e = static_cast<std::size_t>(window); e < ma.size(); ++e) {
        const double prev = ma[e - static_cast<std::size_t>(window)];
        if (std::abs(ma[e] - prev) < tolerance * std::max(std::abs(prev), 1e-12)) {
            return static_cast<int>(e);
        }
    }
    return -1;
}

}  // namespace diffabm

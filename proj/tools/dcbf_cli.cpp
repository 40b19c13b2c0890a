// Command-line front end: safe-control runs, scenario sampling, risk
// verification, and the bundled experiment presets.

#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dcbf/config.hpp"
#include "dcbf/experiments.hpp"
#include "json.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string output_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool quiet = false;
};

void add_common(CLI::App* sub, CommonArgs& a) {
  sub->add_option("--config", a.config_path, "JSON config file")
      ->check(CLI::ExistingFile);
  sub->add_option("--output", a.output_dir, "output directory");
  sub->add_option("--seed", a.seed, "override the sampler seed")
      ->each([&a](const std::string&) { a.seed_set = true; });
  sub->add_flag("--quiet", a.quiet, "suppress the stdout summary");
}

nlohmann::json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw dcbf::SchemaError("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw dcbf::SchemaError("cannot parse " + path + ": " + e.what());
  }
  return j;
}

dcbf::RunConfig resolve_config(const CommonArgs& a, const std::string& preset = "") {
  nlohmann::json base =
      preset.empty() ? nlohmann::json::object() : dcbf::experiment_patch(preset);
  if (!a.config_path.empty()) base.merge_patch(load_json(a.config_path));
  dcbf::RunConfig cfg = dcbf::parse_config(base);
  if (const char* env = std::getenv("DCBF_OUTPUT_DIR"))
    if (*env) cfg.output_dir = env;
  if (!a.output_dir.empty()) cfg.output_dir = a.output_dir;
  if (a.seed_set) cfg.seed = a.seed;
  return cfg;
}

std::filesystem::path prepare_output(const dcbf::RunConfig& cfg) {
  std::filesystem::path dir(cfg.output_dir);
  std::filesystem::create_directories(dir);
  dcbf::write_config_file((dir / "resolved_config.json").string(), cfg);
  return dir;
}

int do_run_control(const dcbf::RunConfig& cfg, bool quiet) {
  const auto dir = prepare_output(cfg);
  dcbf::ControlRun run = dcbf::run_control_experiment(cfg);
  dcbf::write_trajectory_csv((dir / "trajectory.csv").string(), run.trajectory);
  dcbf::write_steps_jsonl((dir / "steps.jsonl").string(), run.steps);
  if (!quiet) {
    std::cout << "steps " << run.steps.size() << ", mode " << cfg.mode
              << ", contraction rate " << run.spectrum0.rate << "\n";
    std::cout << "min distance slack " << run.min_safety << ", max goal error "
              << run.goal_error.maxCoeff() << "\n";
    std::cout << "wrote " << (dir / "trajectory.csv").string() << " and "
              << (dir / "steps.jsonl").string() << "\n";
  }
  return 0;
}

int do_sample(const dcbf::RunConfig& cfg, bool quiet) {
  const auto dir = prepare_output(cfg);
  dcbf::SystemSetup sys = dcbf::build_system(cfg);
  dcbf::SamplerOptions opts;
  opts.rejection_draws = cfg.rejection_draws;
  opts.max_restarts = cfg.max_restarts;
  std::vector<dcbf::SampleStats> stats;
  auto states = dcbf::sample_many(sys.specs, sys.topo, sys.groups, cfg.sample_count,
                                  cfg.seed, opts, &stats);
  dcbf::write_samples_csv((dir / "samples.csv").string(), states);
  long draws = 0;
  int restarts = 0;
  for (const auto& s : stats) {
    draws += s.draws;
    restarts += s.restarts;
  }
  if (!quiet) {
    std::cout << "sampled " << states.size() << " scenarios (" << draws
              << " draws, " << restarts << " restarts)\n";
    std::cout << "wrote " << (dir / "samples.csv").string() << "\n";
  }
  return 0;
}

int do_verify(const dcbf::RunConfig& cfg, bool quiet) {
  const auto dir = prepare_output(cfg);
  dcbf::VerifyOutcome v = dcbf::verify_experiment(cfg);
  nlohmann::json report = dcbf::verify_report(v);
  std::ofstream out(dir / "verification.json");
  out << report.dump(2) << "\n";
  if (!quiet) {
    std::cout << "s_star " << v.verification.total_support << ", risk interval ["
              << v.interval.lower << ", " << v.interval.upper << "] at confidence "
              << v.interval.confidence << "\n";
    std::cout << "eta used " << v.eta_used << " (derived bound "
              << v.certificate.eta << ")\n";
    std::cout << "wrote " << (dir / "verification.json").string() << "\n";
  }
  return 0;
}

int do_truncation_study(const dcbf::RunConfig& cfg, bool quiet) {
  const auto dir = prepare_output(cfg);
  dcbf::SystemSetup sys = dcbf::build_system(cfg);
  const int n = cfg.num_agents;
  dcbf::SamplerOptions opts;
  opts.rejection_draws = cfg.rejection_draws;
  opts.max_restarts = cfg.max_restarts;
  auto samples = dcbf::sample_many(sys.specs, sys.topo, sys.groups, cfg.sample_count,
                                   cfg.seed, opts);
  dcbf::SolverParams draft;
  draft.penalty_floor = cfg.penalty_floor;
  draft.selection_margin = cfg.selection_margin;
  draft.step_margin = cfg.step_margin;
  const Eigen::VectorXd tol = Eigen::VectorXd::Constant(n, cfg.tol);
  const Eigen::VectorXd beta = Eigen::VectorXd::Constant(n, cfg.beta);
  dcbf::TruncationCertificate cert = dcbf::select_truncation(
      sys.specs, sys.topo, sys.groups, samples, tol, beta, draft);

  int within_budget = 0;
  double worst_rho = 0.0;
  for (const auto& x : samples) {
    dcbf::ControlDecision dec =
        dcbf::run_truncated(sys.specs, sys.topo, sys.groups, x, cert.params, cert.eta);
    worst_rho = std::max(worst_rho, dec.rho_sum_last);
    if (dec.rho_sum_last <= cert.epsilon_total) ++within_budget;
  }

  nlohmann::json j;
  j["eta"] = cert.eta;
  j["rate_max"] = cert.rate_max;
  j["epsilon_total"] = cert.epsilon_total;
  j["confidence"] = cert.confidence;
  j["penalty"] = std::vector<double>(cert.penalty.data(), cert.penalty.data() + n);
  j["eps_tilde"] =
      std::vector<double>(cert.eps_tilde.data(), cert.eps_tilde.data() + n);
  j["violation_level"] = std::vector<double>(cert.violation_level.data(),
                                             cert.violation_level.data() + n);
  j["samples_within_budget"] = within_budget;
  j["samples_total"] = static_cast<int>(samples.size());
  j["rho_sum_max_at_eta"] = worst_rho;
  std::ofstream out(dir / "truncation.json");
  out << j.dump(2) << "\n";
  if (!quiet) {
    std::cout << "eta " << cert.eta << ", budget " << cert.epsilon_total << ", "
              << within_budget << "/" << samples.size()
              << " samples within budget at eta (worst rho_sum " << worst_rho
              << ")\n";
    std::cout << "wrote " << (dir / "truncation.json").string() << "\n";
  }
  return 0;
}

int do_cdf_study(const dcbf::RunConfig& cfg, bool quiet) {
  const auto dir = prepare_output(cfg);
  auto progress = [&](int rep) {
    if (!quiet && rep % 25 == 0)
      std::cout << "repeat " << rep << "/" << cfg.repeats << "\n" << std::flush;
  };
  dcbf::CdfStudy study = dcbf::cdf_experiment(cfg, progress);
  dcbf::write_cdf_csv((dir / "cdf.csv").string(), study);
  nlohmann::json j;
  j["repeats"] = cfg.repeats;
  j["coverage"] = study.coverage;
  std::ofstream out(dir / "cdf_summary.json");
  out << j.dump(2) << "\n";
  if (!quiet) {
    std::cout << "coverage " << study.coverage << " over " << cfg.repeats
              << " repeats\n";
    std::cout << "wrote " << (dir / "cdf.csv").string() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"distributed safe-control synthesis and risk certification"};
  app.require_subcommand(1);

  CommonArgs run_args, sample_args, verify_args, exp_args;
  std::string exp_name;

  auto* run = app.add_subcommand("run-control", "closed-loop safe control run");
  add_common(run, run_args);
  auto* sample = app.add_subcommand("sample", "draw admissible joint states");
  add_common(sample, sample_args);
  auto* verify = app.add_subcommand("verify", "scenario-based risk certification");
  add_common(verify, verify_args);
  auto* exp = app.add_subcommand("experiment", "run a bundled preset");
  exp->add_option("name", exp_name, "preset name")
      ->required()
      ->check(CLI::IsMember(dcbf::experiment_names()));
  add_common(exp, exp_args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return do_run_control(resolve_config(run_args), run_args.quiet);
    if (*sample) return do_sample(resolve_config(sample_args), sample_args.quiet);
    if (*verify) return do_verify(resolve_config(verify_args), verify_args.quiet);
    if (*exp) {
      const dcbf::RunConfig cfg = resolve_config(exp_args, exp_name);
      if (exp_name == "swap10") return do_run_control(cfg, exp_args.quiet);
      if (exp_name == "verify4") return do_verify(cfg, exp_args.quiet);
      if (exp_name == "truncation_study")
        return do_truncation_study(cfg, exp_args.quiet);
      if (exp_name == "cdf_study") return do_cdf_study(cfg, exp_args.quiet);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

// Command-line driver for single red blood cell simulations.
//
//   simulate --config case.cfg --flow a --degree 16 --out runs/a16
//
// Exit codes: 0 success, 2 configuration error, 3 integration failure,
// 4 I/O error.

#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "rbc/sim.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Red blood cell in Stokes flow: boundary integral simulation"};
  std::string config_path;
  std::optional<std::string> flow, mode, out;
  std::optional<int> degree, threads;
  std::optional<double> rtol, atol, max_step, t_end;
  bool quiet = false;

  app.add_option("--config", config_path, "flat key = value configuration file");
  app.add_option("--flow", flow, "a | b | c | d | shear | parabolic | quiescent");
  app.add_option("--degree", degree, "spherical harmonic degree N");
  app.add_option("--mode", mode, "implicit | explicit");
  app.add_option("--rtol", rtol, "relative tolerance");
  app.add_option("--atol", atol, "absolute tolerance");
  app.add_option("--max-step", max_step, "largest time step");
  app.add_option("--t-end", t_end, "final time");
  app.add_option("--out", out, "output directory");
  app.add_option("--threads", threads, "worker threads for the boundary integrals");
  app.add_flag("--quiet", quiet, "suppress progress output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  rbc::sim::SimulationConfig cfg;
  try {
    rbc::sim::Settings settings;
    if (!config_path.empty()) settings = rbc::sim::read_settings(config_path);
    auto put = [&](const char* key, const auto& v) {
      if (v) settings.emplace_back(key, CLI::detail::to_string(*v));
    };
    put("flow", flow);
    put("degree", degree);
    put("mode", mode);
    put("rtol", rtol);
    put("atol", atol);
    put("max_step", max_step);
    put("t_end", t_end);
    put("out", out);
    put("threads", threads);
    cfg = rbc::sim::build_config(settings);
  } catch (const rbc::sim::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  }

  try {
    rbc::sim::RunOptions opts;
    opts.log = quiet ? nullptr : &std::cerr;
    const rbc::sim::RunResult r = rbc::sim::run(cfg, opts);
    if (r.exit_code != 0) {
      std::cerr << "integration failed at t = " << r.t << ": " << r.message << '\n';
      return r.exit_code;
    }
    if (!quiet) {
      std::cerr << "done: t = " << r.t << ", " << r.stats.steps << " steps, "
                << r.stats.residual_evals << " residuals, " << r.stats.jvp_evals
                << " jvps\n";
    }
    return 0;
  } catch (const rbc::sim::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const rbc::sim::IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return 4;
  } catch (const rbc::ode::IntegrationFailure& e) {
    std::cerr << "integration failed: " << e.what() << '\n';
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return 4;
  }
}

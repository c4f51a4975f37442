// dualcba: run experiments, compare runs, cross-check the oracles.

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <string>

#include "dualcba/config.hpp"
#include "dualcba/experiment.hpp"
#include "dualcba/oracle.hpp"

namespace {

int oracle_check(int hypergrad_cases, int instances) {
  using namespace dcba::oracle;
  std::vector<CheckResult> results;
  results.push_back(check_hypergradients(hypergrad_cases));
  auto lb = check_linear_bilevel(instances);
  results.push_back(lb.agreement);
  results.push_back(lb.stationarity);
  results.push_back(lb.substitution);
  results.push_back(check_alignment_toy());
  bool ok = true;
  for (const auto& r : results) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
    ok = ok && r.passed;
  }
  return ok ? dcba::exit_ok : dcba::exit_check;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual bias-adaptor continual learning lab"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "train one config over a list of seeds");
  std::string config_path;
  std::vector<std::string> sets;
  bool overwrite = false;
  unsigned jobs = 1;
  bool dump = false;
  run->add_option("-c,--config", config_path, "key = value config file");
  run->add_option("--set", sets, "override as key=value (repeatable)");
  run->add_flag("--overwrite", overwrite, "replace the contents of a non-empty run directory");
  run->add_option("-j,--jobs", jobs, "seeds trained in parallel")->check(CLI::PositiveNumber);
  run->add_flag("--print-config", dump, "print the resolved config and exit");
  // One flag per config key; applied after the file and before --set.
  std::map<std::string, std::string> flag_values;
  for (const auto& k : dcba::cfg::keys()) {
    const std::string name = k.name;
    run->add_option("--" + name, flag_values[name], k.doc);
  }

  auto* cmp = app.add_subcommand("compare", "paired per-seed ACC/FM deltas of run b against run a");
  std::string dir_a, dir_b;
  cmp->add_option("run_a", dir_a, "baseline run directory")->required();
  cmp->add_option("run_b", dir_b, "treatment run directory")->required();

  auto* chk = app.add_subcommand("oracle-check", "cross-validate the analytic oracles");
  int cases = 50, instances = 100;
  chk->add_option("--nets", cases, "random nets for the hypergradient check");
  chk->add_option("--instances", instances, "random linear bi-level instances");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? dcba::exit_ok : dcba::exit_usage;
  }

  try {
    if (*run) {
      dcba::ExperimentSpec spec;
      if (!config_path.empty()) spec = dcba::load_spec(config_path);
      for (const auto& k : dcba::cfg::keys())
        if (run->count(std::string("--") + k.name)) dcba::set_key(spec, k.name, flag_values[k.name]);
      for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw dcba::ConfigError("--set expects key=value, got '" + kv + "'");
        dcba::set_key(spec, dcba::cfg::trim(kv.substr(0, eq)), kv.substr(eq + 1));
      }
      dcba::validate(spec);
      if (dump) {
        std::cout << dcba::serialize_spec(spec);
        return dcba::exit_ok;
      }
      auto runs = dcba::run_experiment(spec, {overwrite, jobs});
      for (const auto& r : runs) std::cout << dcba::summary_json(r).dump() << '\n';
      std::cout << dcba::aggregate_json(runs).dump() << '\n';
      std::cerr << "results in " << dcba::run_directory(spec).string() << '\n';
      return dcba::exit_ok;
    }
    if (*cmp) {
      std::cout << dcba::compare_runs(dir_a, dir_b).dump(2) << '\n';
      return dcba::exit_ok;
    }
    if (*chk) return oracle_check(cases, instances);
  } catch (const dcba::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return dcba::exit_usage;
  } catch (const dcba::DivergenceError& e) {
    std::cerr << "diverged at step " << e.step << " (task " << e.task << "): " << e.what() << '\n';
    return dcba::exit_divergence;
  } catch (const dcba::PairingError& e) {
    std::cerr << "pairing error: " << e.what() << '\n';
    return dcba::exit_pairing;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return dcba::exit_failure;
  }
  return dcba::exit_ok;
}

// dflab: train, eval, compare, diagnose, calibrate-gate.
//
// Every config field can be set with a flag named by its dotted path, e.g.
//   dflab train --config base.json --train.steps 500 --ablation.no_gate true

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dflab/errors.hpp"
#include "dflab/experiment.hpp"

namespace {

using nlohmann::json;

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (const std::string& item : split_list(s)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw dflab::UsageError("bad seed '" + item + "'");
    }
  }
  return out;
}

// Turns leftover "--a.b value" / "--a.b=value" arguments into overrides.
json apply_flag_overrides(json j, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& arg = extras[i];
    if (arg.rfind("--", 0) != 0) throw dflab::UsageError("unexpected argument '" + arg + "'");
    std::string path = arg.substr(2);
    std::string value;
    if (const auto eq = path.find('='); eq != std::string::npos) {
      value = path.substr(eq + 1);
      path = path.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw dflab::UsageError("flag --" + path + " needs a value");
      value = extras[++i];
    }
    j = dflab::apply_override(std::move(j), path, value);
  }
  return j;
}

dflab::ExperimentConfig resolve_config(const std::string& path,
                                       const std::vector<std::string>& extras) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw dflab::ConfigError("cannot open config " + path);
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw dflab::ConfigError(path + ": " + e.what());
    }
  }
  dflab::ExperimentConfig cfg = dflab::config_from_json(apply_flag_overrides(std::move(j), extras));
  cfg.validate();
  return cfg;
}

std::string cell(const std::optional<double>& v) { return v ? dflab::format_double(*v) : "-"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Delta Forcing desk-scale lab"};
  app.require_subcommand(1);

  std::string config_path;
  auto add_config = [&config_path](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "JSON config file");
    sub->allow_extras();
  };

  CLI::App* train = app.add_subcommand("train", "run streaming long tuning");
  add_config(train);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a trained run");
  std::string run_dir;
  std::size_t rollouts = 0;
  std::string eval_seeds;
  eval->add_option("run", run_dir, "run directory")->required();
  eval->add_option("-n,--rollouts", rollouts, "rollouts per seed (default: eval.rollouts)");
  eval->add_option("-s,--seeds", eval_seeds, "comma-separated seeds (default: eval.seeds)");

  CLI::App* compare = app.add_subcommand("compare", "train and evaluate arms x seeds");
  add_config(compare);
  std::string arms = "baseline,full,no_cont,no_gate,ideal";
  std::string compare_seeds = "0,1,2,3,4";
  std::string compare_out = "compare";
  compare->add_option("--arms", arms, "comma-separated presets; the first is the reference");
  compare->add_option("--seeds", compare_seeds, "comma-separated master seeds");
  compare->add_option("-o,--out", compare_out, "report directory");

  CLI::App* diagnose = app.add_subcommand("diagnose", "PCA and failure analysis of a trajectory");
  add_config(diagnose);
  std::string trajectory;
  std::string diagnose_out = "diagnose";
  diagnose->add_option("trajectory", trajectory, "trajectory CSV")->required();
  diagnose->add_option("-o,--out", diagnose_out, "output directory");

  CLI::App* calibrate = app.add_subcommand("calibrate-gate", "estimate mu and s from a warm-up");
  add_config(calibrate);

  CLI::App* show = app.add_subcommand("config", "print the resolved config");
  add_config(show);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      const auto cfg = resolve_config(config_path, train->remaining());
      const auto result = dflab::run_train(cfg);
      std::cout << "run " << result.dir.string() << "\n"
                << "config_hash " << result.manifest.config_hash << "\n"
                << "mu " << dflab::format_double(result.log.mu) << " sharpness "
                << dflab::format_double(result.log.sharpness) << "\n";
    } else if (eval->parsed()) {
      const auto cfg = dflab::load_config(std::filesystem::path(run_dir) / "config.json");
      const std::size_t n = rollouts > 0 ? rollouts : cfg.eval.rollouts;
      const auto seeds = eval_seeds.empty() ? cfg.eval.seeds : parse_seeds(eval_seeds);
      const auto result = dflab::run_eval(run_dir, n, seeds);
      std::cout << "metric median iqr count\n";
      for (const auto& m : result.summary)
        std::cout << m.metric << " " << dflab::format_double(m.median) << " "
                  << dflab::format_double(m.iqr) << " " << m.count << "\n";
      std::cout << "pooled_label " << dflab::to_string(result.pooled_label) << "\n";
    } else if (compare->parsed()) {
      const auto base = resolve_config(config_path, compare->remaining());
      std::vector<dflab::ArmSpec> specs;
      for (const std::string& name : split_list(arms)) specs.push_back(dflab::preset_arm(name, base));
      const auto report =
          dflab::run_compare(specs, parse_seeds(compare_seeds), compare_out, base.execution);
      std::cout << "arm runs failed median_acc iqr_acc median_scatter median_displacement\n";
      for (const auto& a : report.arms)
        std::cout << a.arm << " " << a.runs << " " << a.failed << " "
                  << cell(a.median_mode_accuracy) << " " << cell(a.iqr_mode_accuracy) << " "
                  << cell(a.median_scatter) << " " << cell(a.median_displacement) << "\n";
      std::cout << "report " << report.dir.string() << "\n";
    } else if (diagnose->parsed()) {
      const auto cfg = resolve_config(config_path, diagnose->remaining());
      const auto result = dflab::run_diagnose(trajectory, diagnose_out, cfg);
      std::cout << "label " << dflab::to_string(result.label) << "\n"
                << "output " << result.dir.string() << "\n";
    } else if (calibrate->parsed()) {
      const auto cfg = resolve_config(config_path, calibrate->remaining());
      const auto result = dflab::run_calibrate_gate(cfg);
      std::cout << "mu " << dflab::format_double(result.calibration.mu) << "\n"
                << "sharpness " << dflab::format_double(result.calibration.sharpness) << "\n"
                << "samples " << result.calibration.samples << "\n";
    } else if (show->parsed()) {
      const auto cfg = resolve_config(config_path, show->remaining());
      std::cout << dflab::to_json(cfg).dump(2) << "\n";
    }
  } catch (const dflab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const dflab::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const dflab::ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 3;
  } catch (const dflab::DegenerateInputError& e) {
    std::cerr << "degenerate input: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

// upinn: train bodies, transfer to new family values, evaluate, ablate.
// Exit codes: 0 ok, 2 config/usage error, 3 numerical abort.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "upinn/checkpoint.hpp"
#include "upinn/config.hpp"
#include "upinn/error.hpp"
#include "upinn/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace upinn;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kNumerical = 3;

fs::path output_root(const config::TrainConfig& cfg) {
  if (const char* env = std::getenv("UPINN_OUT_DIR"); env && *env) {
    return fs::path(env) / cfg.name;
  }
  return cfg.output_dir;
}

void write_file(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw ConfigError("cannot write " + tmp.string());
    f << text;
    if (!f) throw ConfigError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

// Combined hash of every body in the model, in group order.
std::uint64_t bodies_hash(const nn::MultiHeadModel& m) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& g : m.groups) {
    h ^= nn::parameter_hash(g.body);
    h *= 1099511628211ULL;
  }
  return h;
}

checkpoint::Checkpoint make_checkpoint(const std::string& kind, const config::TrainConfig& cfg,
                                       const nn::MultiHeadModel& model, std::size_t epoch,
                                       const std::string& rng) {
  checkpoint::Checkpoint ck;
  ck.kind = kind;
  ck.config = config::to_json(cfg);
  ck.config_hash = config::hash(cfg);
  ck.model = model;
  ck.epoch = epoch;
  ck.rng_state = rng;
  return ck;
}

void write_record(const fs::path& dir, const trainer::RunRecord& rec, const std::string& ckpt) {
  write_file(dir / "run.csv", rec.to_csv());
  write_file(dir / "metrics.csv", rec.metrics_csv());
  json wt = {{"wall_seconds", rec.wall_seconds}, {"checkpoint", ckpt}};
  write_file(dir / "walltime.json", wt.dump(2) + "\n");
}

void write_eval(const fs::path& dir, const trainer::EvalReport& rep) {
  write_file(dir / "report.json", rep.to_json().dump(2) + "\n");
  for (std::size_t a = 0; a < rep.heads.size(); ++a) {
    write_file(dir / ("plot_head" + std::to_string(a) + ".csv"), rep.heads[a].plot_csv());
  }
  for (std::size_t a = 0; a < rep.efe.size(); ++a) {
    write_file(dir / ("v_table_head" + std::to_string(a) + ".csv"), rep.efe[a].v_table_csv());
  }
}

void print_warnings(const config::TrainConfig& cfg) {
  for (const auto& w : config::warnings(cfg)) {
    std::cerr << "warning: " << w << "\n";
  }
}

trainer::Hooks progress_hooks(bool quiet) {
  trainer::Hooks h;
  if (!quiet) {
    h.progress = [](const trainer::RunRow& r) {
      if (r.sqrtg) {
        std::cerr << "epoch " << r.epoch << " l_tot " << r.l_tot << " sqrtg_mean "
                  << r.sqrtg->mean << "\n";
      }
    };
  }
  return h;
}

int cmd_train_body(const std::string& config_path, bool dry_run, bool quiet) {
  const auto cfg = config::load(config_path);
  const auto problem = config::make_problem(cfg);
  print_warnings(cfg);
  if (dry_run) {
    std::cout << config::to_json(cfg).dump(2) << "\n";
    return kOk;
  }
  const fs::path dir = output_root(cfg);
  fs::create_directories(dir);
  const fs::path ckpt = dir / (cfg.name + ".ckpt");
  auto hooks = progress_hooks(quiet);
  hooks.checkpoint = [&](const nn::MultiHeadModel& m, std::size_t epoch, const std::string& rng) {
    checkpoint::save(ckpt.string(), make_checkpoint("body", cfg, m, epoch, rng));
  };
  const auto res = trainer::train_body(cfg, *problem, hooks);
  write_record(dir, res.record, ckpt.filename().string());
  write_file(dir / "config.json", config::to_json(cfg).dump(2) + "\n");
  std::cout << "checkpoint " << ckpt.string() << "\n";
  return kOk;
}

int cmd_transfer(const std::string& body_path, double param, const std::string& config_path,
                 bool quiet) {
  const auto body = checkpoint::load(body_path);
  const auto body_cfg = config::parse(body.config);
  const auto cfg = config_path.empty() ? body_cfg : config::load(config_path);
  if (cfg.problem != body_cfg.problem) {
    throw ConfigError("config problem '" + cfg.problem + "' does not match the body's '" +
                      body_cfg.problem + "'");
  }
  const auto problem = config::make_problem(cfg);
  (void)problem->domain(param);
  print_warnings(cfg);

  std::ostringstream tag;
  tag << cfg.name << "_tl_" << param;
  auto tl_cfg = cfg;
  tl_cfg.name = tag.str();
  tl_cfg.transfer.param = param;
  const fs::path dir = output_root(cfg) / tl_cfg.name;
  fs::create_directories(dir);
  const fs::path ckpt = dir / (tl_cfg.name + ".ckpt");

  std::cout << "frozen body hash before " << hex(bodies_hash(body.model)) << "\n";
  auto hooks = progress_hooks(quiet);
  hooks.checkpoint = [&](const nn::MultiHeadModel& m, std::size_t epoch, const std::string& rng) {
    auto ck = make_checkpoint("transfer", tl_cfg, m, epoch, rng);
    ck.extra = {{"body_checkpoint", body_path}, {"body_config_hash", body.config_hash}};
    checkpoint::save(ckpt.string(), ck);
  };
  const auto res = trainer::transfer(body.model, param, cfg, *problem, hooks);
  std::cout << "frozen body hash after  " << hex(bodies_hash(res.model)) << "\n";
  write_record(dir, res.record, ckpt.filename().string());
  const auto rep = trainer::evaluate(res.model, *problem, cfg, cfg.eval.oracle);
  write_eval(dir, rep);
  std::cout << "checkpoint " << ckpt.string() << "\n";
  if (!rep.heads.empty()) {
    std::cout << "rms_percent " << rep.rms_percent() << " max_re_percent "
              << rep.max_re_percent() << "\n";
  }
  return kOk;
}

int cmd_eval(const std::string& model_path, const std::string& oracle, const std::string& out) {
  const auto ck = checkpoint::load(model_path);
  const auto cfg = config::parse(ck.config);
  const auto problem = config::make_problem(cfg);
  const auto rep = trainer::evaluate(ck.model, *problem, cfg, oracle);
  const fs::path dir = out.empty() ? fs::path(model_path).parent_path() : fs::path(out);
  if (!dir.empty()) fs::create_directories(dir);
  write_eval(dir.empty() ? fs::path(".") : dir, rep);
  if (!rep.heads.empty()) {
    std::cout << "rms_percent " << rep.rms_percent() << " max_re_percent "
              << rep.max_re_percent() << "\n";
  }
  return kOk;
}

int cmd_ablate(const std::string& problem_name, long long seeds, std::string config_path,
               std::size_t jobs) {
  if (seeds <= 0) {
    throw ConfigError("--seeds must be at least 1");
  }
  if (config_path.empty()) {
    config_path = std::string(UPINN_CONFIG_DIR) + "/" + problem_name + "-ablate.json";
  }
  auto cfg = config::load(config_path);
  if (cfg.problem != problem_name) {
    throw ConfigError("config problem '" + cfg.problem + "' does not match --problem");
  }
  print_warnings(cfg);
  const fs::path dir = output_root(cfg);
  const auto res = trainer::ablate(cfg, static_cast<std::size_t>(seeds), jobs,
                                   [](const std::string& s) { std::cerr << s << "\n"; });
  fs::create_directories(dir);
  write_file(dir / "ablation.csv", res.to_csv());
  for (const auto& r : res.runs) {
    const std::string stem = "seed" + std::to_string(r.seed) + (r.ur ? "_ur" : "_noreg");
    write_file(dir / (stem + "_body.csv"), r.body.to_csv());
    write_file(dir / (stem + "_tl.csv"), r.transfer.to_csv());
  }
  std::cout << "median_tl_rms_ur " << res.median_rms(true) << " median_tl_rms_noreg "
            << res.median_rms(false) << " win_rate " << res.win_rate() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-head PINN trainer with latent-space regularization"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "no progress output");

  std::string config_path;
  bool dry_run = false;
  auto* train = app.add_subcommand("train-body", "train bodies and heads on the head grid");
  train->add_option("--config", config_path, "experiment JSON")->required();
  train->add_flag("--dry-run", dry_run, "validate and print the resolved config");

  std::string body_path;
  double param = 0.0;
  std::string tl_config;
  auto* tl = app.add_subcommand("transfer", "train a fresh head on frozen bodies");
  tl->add_option("--body", body_path, "body checkpoint")->required();
  tl->add_option("--param", param, "family parameter value")->required();
  tl->add_option("--config", tl_config, "experiment JSON (default: the body's)");

  std::string model_path;
  std::string oracle = "rk45";
  std::string eval_out;
  auto* ev = app.add_subcommand("eval", "compare a model against an oracle");
  ev->add_option("--model", model_path, "checkpoint")->required();
  ev->add_option("--oracle", oracle, "rk45, rk4 or implicit")
      ->check(CLI::IsMember({"rk45", "rk4", "implicit"}));
  ev->add_option("--out", eval_out, "output directory (default: next to the checkpoint)");

  std::string ab_problem;
  long long seeds = 0;
  std::string ab_config;
  std::size_t jobs = 1;
  auto* ab = app.add_subcommand("ablate", "UR on/off over matched seeds");
  ab->add_option("--problem", ab_problem, "flame, vdp or efe")->required();
  ab->add_option("--seeds", seeds, "number of seeds")->required();
  ab->add_option("--config", ab_config, "experiment JSON with transfer.param");
  ab->add_option("--jobs", jobs, "parallel runs")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (train->parsed()) return cmd_train_body(config_path, dry_run, quiet);
    if (tl->parsed()) return cmd_transfer(body_path, param, tl_config, quiet);
    if (ev->parsed()) return cmd_eval(model_path, oracle, eval_out);
    if (ab->parsed()) return cmd_ablate(ab_problem, seeds, ab_config, jobs);
  } catch (const NumericalAbort& e) {
    std::cerr << e.what() << "\n";
    return kNumerical;
  } catch (const NonFiniteError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

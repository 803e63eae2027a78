#include <doctest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "upinn_cli_test";

struct Run {
  int code;
  std::string out;
};

Run cli(const std::string& args) {
  const std::string cmd = "UPINN_OUT_DIR='" + (kRoot / "out").string() + "' '" UPINN_CLI "' -q " +
                          args + " 2>/dev/null";
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::string out;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, p)) out += buf;
  const int status = pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

fs::path write_config(const std::string& name, const std::string& body) {
  fs::create_directories(kRoot);
  const fs::path p = kRoot / (name + ".json");
  std::ofstream(p) << body;
  return p;
}

const char* kTiny = R"({"name": "tiny", "problem": "flame", "epochs": 40, "seed": 5,
  "body": {"hidden": [8], "latent": 6}, "head": {"hidden": [6]},
  "sampler": {"points": 12}, "ur": {"enabled": true, "every": 10},
  "checkpoint_every": 15, "eval": {"points": 50},
  "transfer": {"param": 0.018, "epochs": 20}})";

std::string line_with(const std::string& text, const std::string& key) {
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind(key, 0) == 0) return line.substr(key.size());
  }
  return {};
}

}  // namespace

TEST_CASE("config errors exit 2 without writing outputs") {
  fs::remove_all(kRoot);
  const auto bad = write_config("bad", R"({"name": "bad", "problem": "flame", "epochs": )");
  CHECK(cli("train-body --config " + bad.string()).code == 2);
  const auto unknown = write_config("bad2", R"({"name": "bad2", "problem": "flame", "epoch": 3})");
  CHECK(cli("train-body --config " + unknown.string()).code == 2);
  CHECK_FALSE(fs::exists(kRoot / "out"));
  CHECK(cli("train-body --config " + (kRoot / "missing.json").string()).code == 2);
  CHECK(cli("train-body").code == 2);
  CHECK(cli("--help").code == 0);
}

TEST_CASE("dry run validates and computes nothing") {
  fs::remove_all(kRoot);
  const auto cfg = write_config("tiny", kTiny);
  const auto r = cli("train-body --dry-run --config " + cfg.string());
  CHECK(r.code == 0);
  CHECK(r.out.find("\"name\": \"tiny\"") != std::string::npos);
  CHECK_FALSE(fs::exists(kRoot / "out"));
}

TEST_CASE("train, rerun, transfer, eval") {
  fs::remove_all(kRoot);
  const auto cfg = write_config("tiny", kTiny);
  const fs::path dir = kRoot / "out" / "tiny";
  REQUIRE(cli("train-body --config " + cfg.string()).code == 0);
  for (const char* f : {"tiny.ckpt", "run.csv", "metrics.csv", "walltime.json", "config.json"}) {
    CHECK(fs::exists(dir / f));
  }
  CHECK(slurp(dir / "run.csv").rfind("epoch,lr,l_de_head_0,", 0) == 0);

  const auto first_run = slurp(dir / "run.csv");
  const auto first_metrics = slurp(dir / "metrics.csv");
  const auto first_ckpt = slurp(dir / "tiny.ckpt");
  REQUIRE(cli("train-body --config " + cfg.string()).code == 0);
  CHECK(slurp(dir / "run.csv") == first_run);
  CHECK(slurp(dir / "metrics.csv") == first_metrics);
  CHECK(slurp(dir / "tiny.ckpt") == first_ckpt);

  CHECK(cli("transfer --body " + (dir / "nope.ckpt").string() + " --param 0.018").code == 2);
  CHECK(cli("transfer --body " + (dir / "tiny.ckpt").string() + " --param 1.5").code == 2);

  const auto tl = cli("transfer --body " + (dir / "tiny.ckpt").string() + " --param 0.018");
  REQUIRE(tl.code == 0);
  const auto before = line_with(tl.out, "frozen body hash before ");
  const auto after = line_with(tl.out, "frozen body hash after  ");
  CHECK(before.size() == 16);
  CHECK(before == after);
  const fs::path tl_dir = dir / "tiny_tl_0.018";
  CHECK(fs::exists(tl_dir / "tiny_tl_0.018.ckpt"));
  CHECK(fs::exists(tl_dir / "report.json"));
  CHECK(slurp(tl_dir / "plot_head0.csv").rfind("t,y_nn,y_oracle,re_percent\n", 0) == 0);
  // the body artifacts are untouched
  CHECK(slurp(dir / "run.csv") == first_run);
  CHECK(slurp(dir / "tiny.ckpt") == first_ckpt);

  const fs::path ev = kRoot / "eval";
  const auto e = cli("eval --model " + (dir / "tiny.ckpt").string() + " --oracle implicit --out " +
                     ev.string());
  CHECK(e.code == 0);
  CHECK(e.out.find("rms_percent") != std::string::npos);
  const auto report = slurp(ev / "report.json");
  CHECK(report.find("\"rms_percent\"") != std::string::npos);
  CHECK(report.find("\"max_re_percent\"") != std::string::npos);
  for (int a = 0; a < 4; ++a) {
    CHECK(fs::exists(ev / ("plot_head" + std::to_string(a) + ".csv")));
  }
  CHECK(cli("eval --model " + (dir / "tiny.ckpt").string() + " --oracle euler").code == 2);
}

TEST_CASE("implicit oracle is flame-only") {
  fs::remove_all(kRoot);
  const auto cfg = write_config("v", R"({"name": "v", "problem": "vdp", "epochs": 2,
      "body": {"hidden": [4], "latent": 3}, "head": {"hidden": [3]}, "sampler": {"points": 5}})");
  REQUIRE(cli("train-body --config " + cfg.string()).code == 0);
  const auto ck = (kRoot / "out" / "v" / "v.ckpt").string();
  CHECK(cli("eval --model " + ck + " --oracle implicit").code == 2);
  CHECK(cli("eval --model " + ck + " --oracle rk4").code == 0);
}

TEST_CASE("ablate") {
  fs::remove_all(kRoot);
  const auto cfg = write_config("ab", R"({"name": "ab", "problem": "flame", "epochs": 20,
      "body": {"hidden": [6], "latent": 4}, "head": {"hidden": [4]}, "sampler": {"points": 8},
      "ur": {"every": 5}, "eval": {"points": 40}, "transfer": {"param": 0.016, "epochs": 10}})");
  CHECK(cli("ablate --problem flame --seeds 0 --config " + cfg.string()).code == 2);
  CHECK(cli("ablate --problem vdp --seeds 1 --config " + cfg.string()).code == 2);
  const auto r = cli("ablate --problem flame --seeds 2 --jobs 2 --config " + cfg.string());
  REQUIRE(r.code == 0);
  CHECK(r.out.find("win_rate") != std::string::npos);
  const auto table = slurp(kRoot / "out" / "ab" / "ablation.csv");
  std::istringstream is(table);
  std::string header;
  std::getline(is, header);
  CHECK(header.find("win_rate") != std::string::npos);
  CHECK(header.find("median") != std::string::npos);
  int rows = 0;
  for (std::string line; std::getline(is, line);) ++rows;
  CHECK(rows == 3);  // two seeds plus the summary row
  fs::remove_all(kRoot);
}

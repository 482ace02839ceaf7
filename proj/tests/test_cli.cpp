#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "epalab/datagen.hpp"
#include "epalab/world_io.hpp"
#include "epalab_cli/cli.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = epalab::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("epalab_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("gen writes world and dataset and is byte-identical on re-run") {
  const auto a = fresh_dir("gen_a"), b = fresh_dir("gen_b");
  const std::vector<std::string> base{"gen", "--prompts", "8",  "--vocab", "32", "--scheme",
                                      "best-of-k", "--k", "4", "--seed", "7", "--out"};
  auto args_a = base, args_b = base;
  args_a.push_back(a.string());
  args_b.push_back(b.string());
  REQUIRE(cli(args_a).code == 0);
  REQUIRE(cli(args_b).code == 0);
  for (const char* f : {"world.json", "dataset.jsonl", "config.json"}) {
    CHECK(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }
  const auto cfg = json::parse(slurp(a / "config.json"));
  const std::string digest = cfg.at("config_digest");
  CHECK(json::parse(slurp(a / "world.json")).at("config_digest") == digest);
  CHECK(slurp(a / "dataset.jsonl").find(digest) != std::string::npos);
  const auto w = epalab::load_world(a / "world.json");
  CHECK(w.prompts() == 8);
  CHECK(w.responses() == 32);
}

TEST_CASE("gen with the degenerate scheme never references y_star") {
  const auto d = fresh_dir("gen_degenerate");
  REQUIRE(cli({"gen", "--scheme", "degenerate", "--y-star", "5", "--records", "400", "--out",
               d.string()})
              .code == 0);
  const auto ds = epalab::load_dataset(d / "dataset.jsonl");
  for (const auto& r : ds.records) {
    CHECK(r.winner != 5);
    for (auto y : r.strong) CHECK(y != 5);
  }
}

TEST_CASE("missing output directory is a nonzero exit naming the path") {
  const std::string missing = (fs::temp_directory_path() / "epalab_no_such_dir_xyz").string();
  fs::remove_all(missing);
  const auto r = cli({"gen", "--out", missing});
  CHECK(r.code != 0);
  CHECK(r.err.find(missing) != std::string::npos);
}

TEST_CASE("config file fields are overridden by flags and validated") {
  const auto d = fresh_dir("gen_config");
  {
    std::ofstream cfg(d / "in.json");
    cfg << R"({"prompts": 3, "vocab": 12, "records": 9})";
  }
  REQUIRE(cli({"gen", "--config", (d / "in.json").string(), "--vocab", "16", "--out", d.string()})
              .code == 0);
  const auto eff = json::parse(slurp(d / "config.json"));
  CHECK(eff.at("prompts") == 3);
  CHECK(eff.at("vocab") == 16);
  CHECK(eff.at("records") == 9);

  {
    std::ofstream cfg(d / "bad.json");
    cfg << R"({"prompts": "three"})";
  }
  const auto bad = cli({"gen", "--config", (d / "bad.json").string(), "--out", d.string()});
  CHECK(bad.code == epalab::cli::kExitConfig);
  CHECK(bad.err.find("prompts") != std::string::npos);

  const auto typo = cli({"gen", "--k", "four", "--out", d.string()});
  CHECK(typo.code == epalab::cli::kExitConfig);
  CHECK(typo.err.find("--k") != std::string::npos);
}

TEST_CASE("train writes policy and trajectory; zero steps keeps the reference") {
  const auto g = fresh_dir("train_gen"), t = fresh_dir("train_out");
  REQUIRE(cli({"gen", "--seed", "3", "--prompts", "4", "--vocab", "16", "--records", "64",
               "--out", g.string()})
              .code == 0);
  const auto world = (g / "world.json").string(), data = (g / "dataset.jsonl").string();
  REQUIRE(cli({"train", "--world", world, "--data", data, "--steps", "0", "--out", t.string()})
              .code == 0);
  const auto w = epalab::load_world(world);
  const auto pol = json::parse(slurp(t / "policy.json"));
  for (std::size_t x = 0; x < w.prompts(); ++x)
    for (std::size_t y = 0; y < w.responses(); ++y)
      CHECK(pol["logits"][x][y].get<double>() == w.reference.logits()(x, y));

  REQUIRE(cli({"train", "--world", world, "--data", data, "--loss", "epa", "--n-weak", "2",
               "--beta", "0.01", "--steps", "200", "--checkpoint-every", "50", "--out",
               t.string()})
              .code == 0);
  const std::string traj = slurp(t / "trajectory.csv");
  CHECK(traj.rfind("# config_digest=", 0) == 0);
  CHECK(traj.find("step,loss,probe_pearson,probe_eps_hat,kl_to_ref,exp_true_reward\n") !=
        std::string::npos);
}

TEST_CASE("train reruns are byte-identical") {
  const auto g = fresh_dir("det_gen"), a = fresh_dir("det_a"), b = fresh_dir("det_b");
  REQUIRE(cli({"gen", "--seed", "5", "--prompts", "4", "--vocab", "16", "--records", "64",
               "--out", g.string()})
              .code == 0);
  const std::vector<std::string> base{"train", "--world", (g / "world.json").string(), "--data",
                                      (g / "dataset.jsonl").string(), "--loss", "epa", "--n-weak",
                                      "2", "--steps", "300", "--seed", "9", "--out"};
  auto aa = base, bb = base;
  aa.push_back(a.string());
  bb.push_back(b.string());
  REQUIRE(cli(aa).code == 0);
  REQUIRE(cli(bb).code == 0);
  for (const char* f : {"policy.json", "trajectory.csv", "config.json"})
    CHECK(slurp(a / f) == slurp(b / f));
}

TEST_CASE("train rejects a loss that does not fit the dataset shape") {
  const auto g = fresh_dir("shape_gen"), t = fresh_dir("shape_out");
  REQUIRE(cli({"gen", "--n-strong", "3", "--records", "32", "--out", g.string()}).code == 0);
  const auto r = cli({"train", "--world", (g / "world.json").string(), "--data",
                      (g / "dataset.jsonl").string(), "--loss", "dpo", "--out", t.string()});
  CHECK(r.code == epalab::cli::kExitConfig);
  CHECK(r.err.find("3 strong negatives") != std::string::npos);
  CHECK(r.err.find("dpo") != std::string::npos);
}

TEST_CASE("train refuses a dataset generated for another world") {
  const auto g1 = fresh_dir("mix_1"), g2 = fresh_dir("mix_2"), t = fresh_dir("mix_out");
  REQUIRE(cli({"gen", "--seed", "1", "--out", g1.string()}).code == 0);
  REQUIRE(cli({"gen", "--seed", "2", "--out", g2.string()}).code == 0);
  const auto r = cli({"train", "--world", (g1 / "world.json").string(), "--data",
                      (g2 / "dataset.jsonl").string(), "--out", t.string()});
  CHECK(r.code == epalab::cli::kExitData);
}

TEST_CASE("certify subsets, and refuses a tampered world") {
  const auto g = fresh_dir("cert_gen"), c = fresh_dir("cert_out");
  REQUIRE(cli({"gen", "--seed", "4", "--out", g.string()}).code == 0);
  const auto r = cli({"certify", "--world", (g / "world.json").string(), "--only",
                      "degeneracy,ed", "--out", c.string()});
  CHECK(r.code == 0);
  const auto doc = json::parse(slurp(c / "certificates.json"));
  CHECK(doc["certificates"].size() == 2);
  CHECK(doc["certificates"]["degeneracy"]["passed"] == true);
  CHECK(doc["all_passed"] == true);

  auto w = json::parse(slurp(g / "world.json"));
  w["reference_logits"][0][0] = 123.0;
  {
    std::ofstream f(g / "tampered.json");
    f << w.dump();
  }
  const auto t = cli({"certify", "--world", (g / "tampered.json").string(), "--out", c.string()});
  CHECK(t.code == epalab::cli::kExitData);
  CHECK(t.err.find("integrity") != std::string::npos);

  const auto unknown = cli({"certify", "--only", "nope", "--out", c.string()});
  CHECK(unknown.code == epalab::cli::kExitConfig);
}

TEST_CASE("certify exits 3 when a certificate fails") {
  const auto c = fresh_dir("cert_fail");
  // A = -1e-9 leaves the two policies indistinguishable, so the certificate must fail
  const auto r = cli({"certify", "--only", "degeneracy", "--shift", "-1e-9", "--out", c.string()});
  CHECK(r.code == epalab::cli::kExitCertificate);
}

TEST_CASE("frontier writes one row per method and beta, deterministically") {
  const auto g = fresh_dir("fr_gen"), a = fresh_dir("fr_a"), b = fresh_dir("fr_b");
  REQUIRE(cli({"gen", "--seed", "6", "--prompts", "4", "--vocab", "16", "--records", "64",
               "--out", g.string()})
              .code == 0);
  const std::vector<std::string> base{"frontier", "--world", (g / "world.json").string(),
                                      "--data", (g / "dataset.jsonl").string(), "--methods",
                                      "dpo,epa", "--betas", "0.01,0.05,0.1,0.5", "--steps", "100",
                                      "--out"};
  auto aa = base, bb = base;
  aa.push_back(a.string());
  bb.push_back(b.string());
  REQUIRE(cli(aa).code == 0);
  REQUIRE(cli(bb).code == 0);
  const std::string csv = slurp(a / "frontier.csv");
  CHECK(csv == slurp(b / "frontier.csv"));
  std::istringstream lines(csv);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(lines, line))
    if (!line.empty() && line[0] != '#' && line.rfind("method,", 0) != 0) ++rows;
  CHECK(rows == 8);

  auto withref = base;
  withref.push_back(a.string());
  withref.push_back("--include-reference");
  REQUIRE(cli(withref).code == 0);
  CHECK(slurp(a / "frontier.csv").find("\nreference,0,0,") != std::string::npos);
}

TEST_CASE("probe reads a trained policy") {
  const auto g = fresh_dir("probe_gen"), t = fresh_dir("probe_out");
  REQUIRE(cli({"gen", "--seed", "8", "--prompts", "4", "--vocab", "16", "--records", "32",
               "--out", g.string()})
              .code == 0);
  REQUIRE(cli({"train", "--world", (g / "world.json").string(), "--data",
               (g / "dataset.jsonl").string(), "--steps", "50", "--out", t.string()})
              .code == 0);
  const auto r = cli({"probe", "--world", (g / "world.json").string(), "--policy",
                      (t / "policy.json").string(), "--out", t.string()});
  CHECK(r.code == 0);
  CHECK(fs::exists(t / "probe.csv"));
}

TEST_CASE("unknown subcommands and flags are config errors") {
  CHECK(cli({"explode"}).code == epalab::cli::kExitConfig);
  CHECK(cli({"gen", "--bogus", "1"}).code == epalab::cli::kExitConfig);
  CHECK(cli({"--help"}).code == 0);
}

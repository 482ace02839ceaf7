#include "epalab_cli/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "epalab/datagen.hpp"
#include "epalab/diagnostics.hpp"
#include "epalab/error.hpp"
#include "epalab/losses.hpp"
#include "epalab/rng.hpp"
#include "epalab/trainer.hpp"
#include "epalab/world_io.hpp"
#include "epalab_cli/certificates.hpp"
#include "options.hpp"

namespace epalab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Io:
      return kExitConfig;
    case ErrorKind::Data:
    case ErrorKind::Shape:
    case ErrorKind::EmptySupport:
    case ErrorKind::Integrity:
      return kExitData;
    case ErrorKind::Check:
      return kExitCertificate;
  }
  return kExitConfig;
}

namespace {

// ---- shared helpers ---------------------------------------------------------

struct Context {
  json cfg;
  std::string digest;
  fs::path out;
  std::ostream& log;
};

long long get_int(const json& cfg, const std::string& key) { return cfg.at(key).get<long long>(); }

std::size_t get_count(const json& cfg, const std::string& key) {
  const long long v = get_int(cfg, key);
  if (v < 0) fail(ErrorKind::Config, fmt::format("{}: must be >= 0, got {}", key, v));
  return static_cast<std::size_t>(v);
}

double get_real(const json& cfg, const std::string& key) { return cfg.at(key).get<double>(); }

std::string get_str(const json& cfg, const std::string& key) {
  return cfg.at(key).get<std::string>();
}

std::uint64_t get_seed(const json& cfg) {
  const long long v = get_int(cfg, "seed");
  if (v < 0) fail(ErrorKind::Config, "seed: must be >= 0");
  return static_cast<std::uint64_t>(v);
}

fs::path require_out_dir(const std::string& out) {
  if (out.empty()) fail(ErrorKind::Config, "--out is required");
  const fs::path p(out);
  if (!fs::is_directory(p)) fail(ErrorKind::Io, "output directory does not exist: " + p.string());
  return p;
}

fs::path require_input(const json& cfg, const std::string& key) {
  const std::string s = get_str(cfg, key);
  if (s.empty()) fail(ErrorKind::Config, fmt::format("--{} is required", key));
  if (!fs::is_regular_file(s)) fail(ErrorKind::Io, fmt::format("{}: no such file: {}", key, s));
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) fail(ErrorKind::Io, "write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_json(const fs::path& path, const json& doc) { write_text(path, doc.dump(2) + "\n"); }

void write_effective_config(const Context& ctx, const std::string& command) {
  json doc = ctx.cfg;
  doc["command"] = command;
  doc["config_digest"] = ctx.digest;
  write_json(ctx.out / "config.json", doc);
}

std::string digest_line(const std::string& digest) { return "# config_digest=" + digest + "\n"; }

Tricks parse_tricks(const std::string& spec, double& margin) {
  Tricks t;
  for (const auto& item : split_list(spec)) {
    const auto eq = item.find('=');
    const std::string name = item.substr(0, eq);
    const std::optional<std::string> arg =
        eq == std::string::npos ? std::nullopt : std::optional(item.substr(eq + 1));
    auto value = [&] {
      if (!arg) fail(ErrorKind::Config, fmt::format("--tricks: '{}' needs a value", name));
      return parse_reals("--tricks " + name, *arg).at(0);
    };
    if (name == "no-ref")
      t.remove_ref = true;
    else if (name == "sft")
      t.sft_coef = value();
    else if (name == "len-p")
      t.len_penalty_alpha = value();
    else if (name == "len-n")
      t.len_normalize = true;
    else if (name == "w-op")
      t.on_policy_weight = true;
    else if (name == "m-c")
      margin = value();
    else
      fail(ErrorKind::Config,
           fmt::format("--tricks: unknown trick '{}' (known: no-ref, sft=F, len-p=F, len-n, "
                       "w-op, m-c=F)",
                       name));
  }
  return t;
}

WeakSource parse_weak_source(const std::string& s) {
  if (s == "in-batch") return WeakSource::InBatch;
  if (s == "precomputed") return WeakSource::Precomputed;
  fail(ErrorKind::Config, "--weak-source: expected in-batch or precomputed, got '" + s + "'");
}

std::vector<Field> training_fields() {
  return {
      {"steps", FieldType::Int, 1000, "optimizer steps"},
      {"lr", FieldType::Real, 1e-2, "learning rate"},
      {"batch", FieldType::Int, 16, "minibatch size"},
      {"optimizer", FieldType::Str, "adam", "sgd or adam"},
      {"checkpoint_every", FieldType::Int, 100, "trajectory cadence in steps"},
      {"margin", FieldType::Real, 0.0, "margin added to strong negatives"},
      {"tricks", FieldType::Str, "", "comma list: no-ref, sft=F, len-p=F, len-n, w-op, m-c=F"},
      {"ipo_tau", FieldType::Real, 0.5, "IPO regression target"},
      {"weak_source", FieldType::Str, "in-batch", "in-batch or precomputed"},
      {"ed_negatives", FieldType::Int, 8, "kernel negatives per record for ed-stat"},
      {"ed_stay", FieldType::Real, 0.5, "kernel stay probability for ed-stat"},
  };
}

TrainConfig train_config_from(const json& cfg) {
  TrainConfig tc;
  tc.steps = get_count(cfg, "steps");
  tc.learning_rate = get_real(cfg, "lr");
  tc.batch_size = get_count(cfg, "batch");
  tc.optimizer = optimizer_from_string(get_str(cfg, "optimizer"));
  tc.checkpoint_every = get_count(cfg, "checkpoint_every");
  tc.seed = get_seed(cfg);
  return tc;
}

LossConfig loss_config_from(const json& cfg, const std::string& loss) {
  LossConfig lc;
  lc.variant = loss_variant_from_string(loss);
  lc.margin_mc = get_real(cfg, "margin");
  lc.tricks = parse_tricks(get_str(cfg, "tricks"), lc.margin_mc);
  lc.ipo_tau = get_real(cfg, "ipo_tau");
  lc.weak_source = parse_weak_source(get_str(cfg, "weak_source"));
  lc.ed_negatives = get_count(cfg, "ed_negatives");
  lc.ed_stay_prob = get_real(cfg, "ed_stay");
  return lc;
}

struct Inputs {
  World world;
  Dataset dataset;
};

Inputs load_inputs(const json& cfg) {
  Inputs in;
  const fs::path world_path = require_input(cfg, "world");
  const fs::path data_path = require_input(cfg, "data");
  in.world = load_world(world_path);
  in.dataset = dataset_from_jsonl(read_text(data_path));
  const auto h = world_hash(in.world);
  if (in.dataset.header.world_hash != h)
    fail(ErrorKind::Data, fmt::format("{} was generated for world {}, but {} hashes to {}",
                                      data_path.string(), hex64(in.dataset.header.world_hash),
                                      world_path.string(), hex64(h)));
  if (const auto v = validate_dataset(in.dataset, in.world); !v.empty())
    fail(ErrorKind::Data, data_path.string() + ": " + v.front());
  return in;
}

// ---- gen ----------------------------------------------------------------------

std::vector<Field> gen_fields() {
  return {
      {"seed", FieldType::Int, 0, "world and dataset seed"},
      {"prompts", FieldType::Int, 8, "number of prompts P"},
      {"vocab", FieldType::Int, 32, "number of responses V"},
      {"reward_spread", FieldType::Real, 3.0, "on-topic rewards lie in [-s, s]"},
      {"weak_floor", FieldType::Real, -10.0, "off-topic rewards lie at or below this"},
      {"on_topic", FieldType::Int, 0, "on-topic responses per prompt (0: max(4, V/4))"},
      {"support", FieldType::Int, 0, "finite-reward responses per prompt (0: V)"},
      {"ref_temperature", FieldType::Real, 0.25, "reference softmax temperature"},
      {"max_length", FieldType::Int, 20, "maximum response length"},
      {"scheme", FieldType::Str, "best-of-k", "best-of-k, pair or degenerate"},
      {"k", FieldType::Int, 4, "candidates per best-of-k record"},
      {"n_strong", FieldType::Int, 1, "strong negatives per record"},
      {"records", FieldType::Int, 256, "number of records"},
      {"y_star", FieldType::Int, -1, "response never sampled by the degenerate scheme"},
      {"label_temperature", FieldType::Real, 0.0, "Gumbel noise on best-of-k labels"},
      {"n_weak", FieldType::Int, 0, "weak negatives per record"},
      {"weak_mode", FieldType::Str, "in-batch", "in-batch (marker only) or precomputed"},
  };
}

int cmd_gen(Context& ctx) {
  const json& c = ctx.cfg;
  WorldParams wp;
  wp.seed = get_seed(c);
  wp.prompts = get_count(c, "prompts");
  wp.responses = get_count(c, "vocab");
  wp.reward_spread = get_real(c, "reward_spread");
  wp.weak_floor = get_real(c, "weak_floor");
  wp.on_topic = get_count(c, "on_topic");
  wp.support = get_count(c, "support");
  wp.ref_temperature = get_real(c, "ref_temperature");
  wp.max_length = static_cast<int>(get_int(c, "max_length"));
  const World world = build_world(wp);

  SamplingScheme scheme;
  scheme.kind = scheme_kind_from_string(get_str(c, "scheme"));
  scheme.k = get_count(c, "k");
  scheme.label_temperature = get_real(c, "label_temperature");
  if (const long long ys = get_int(c, "y_star"); ys >= 0)
    scheme.y_star = static_cast<ResponseId>(ys);
  else if (scheme.kind == SchemeKind::DegenerateAvoidYStar)
    fail(ErrorKind::Config, "--y-star is required by the degenerate scheme");

  Dataset ds = sample_preferences(world, scheme, get_count(c, "records"),
                                  get_count(c, "n_strong"), Rng::derive(wp.seed, 10));
  if (const std::size_t n_weak = get_count(c, "n_weak"); n_weak > 0) {
    const std::string mode = get_str(c, "weak_mode");
    if (mode != "in-batch" && mode != "precomputed")
      fail(ErrorKind::Config, "--weak-mode: expected in-batch or precomputed, got '" + mode + "'");
    ds = attach_weak_negatives(std::move(ds), world, n_weak,
                               mode == "precomputed" ? WeakMode::Precomputed
                                                     : WeakMode::InBatchMarker,
                               Rng::derive(wp.seed, 11));
  }
  ds.header.config_digest = ctx.digest;

  json wdoc = world_to_json(world);
  wdoc["config_digest"] = ctx.digest;
  write_json(ctx.out / "world.json", wdoc);
  write_text(ctx.out / "dataset.jsonl", dataset_to_jsonl(ds));
  write_effective_config(ctx, "gen");
  ctx.log << fmt::format("world {} (P={}, V={}) and {} records written to {}\n",
                         hex64(world_hash(world)), world.prompts(), world.responses(),
                         ds.records.size(), ctx.out.string());
  return kExitOk;
}

// ---- train --------------------------------------------------------------------

std::vector<Field> train_fields() {
  std::vector<Field> f{
      {"world", FieldType::Str, "", "world.json"},
      {"data", FieldType::Str, "", "dataset.jsonl"},
      {"seed", FieldType::Int, 0, "training seed"},
      {"loss", FieldType::Str, "dpo", "dpo, epa, epa-general, ipo, dpo-pl or ed-stat"},
      {"beta", FieldType::Real, 0.1, "KL coefficient"},
      {"n_weak", FieldType::Int, 0, "weak negatives per record"},
      {"audit_every", FieldType::Int, 0, "finite-difference audit cadence (0: off)"},
  };
  for (auto& t : training_fields()) f.push_back(std::move(t));
  return f;
}

json policy_json(const TabularPolicy& policy, const World& world, const std::string& digest,
                 const LossConfig& lc) {
  json logits = json::array();
  for (PromptId x = 0; x < policy.prompts(); ++x) {
    const auto row = policy.logits().row(x);
    logits.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return {{"config_digest", digest},
          {"world_hash", hex64(world_hash(world))},
          {"loss", to_string(lc.variant)},
          {"beta", lc.beta},
          {"P", policy.prompts()},
          {"V", policy.responses()},
          {"logits", std::move(logits)}};
}

TabularPolicy policy_from_json(const json& doc, const World& world) {
  try {
    if (doc.at("world_hash").get<std::string>() != hex64(world_hash(world)))
      fail(ErrorKind::Data, "policy was trained on a different world");
    const auto rows = doc.at("logits").get<std::vector<std::vector<double>>>();
    if (rows.size() != world.prompts()) fail(ErrorKind::Data, "policy: expected P rows");
    Matrix m(world.prompts(), world.responses());
    for (std::size_t x = 0; x < rows.size(); ++x) {
      if (rows[x].size() != world.responses()) fail(ErrorKind::Data, "policy: expected V columns");
      std::copy(rows[x].begin(), rows[x].end(), m.row(x).begin());
    }
    return TabularPolicy(std::move(m));
  } catch (const json::exception& e) {
    fail(ErrorKind::Data, std::string("malformed policy document: ") + e.what());
  }
}

int cmd_train(Context& ctx) {
  const json& c = ctx.cfg;
  const Inputs in = load_inputs(c);
  LossConfig lc = loss_config_from(c, get_str(c, "loss"));
  lc.beta = get_real(c, "beta");
  lc.n_weak = get_count(c, "n_weak");
  TrainConfig tc = train_config_from(c);
  tc.audit_every = get_count(c, "audit_every");

  const auto result = train(in.world, in.dataset.records, lc, tc);

  write_json(ctx.out / "policy.json", policy_json(result.policy, in.world, ctx.digest, lc));
  write_text(ctx.out / "trajectory.csv",
             digest_line(ctx.digest) + trajectory_to_csv(result.trajectory));
  write_effective_config(ctx, "train");

  const auto& last = result.trajectory.points.back();
  ctx.log << fmt::format("{} steps of {} (beta={}): loss {:.6g}, eps_hat {:.6g}, kl {:.6g}\n",
                         tc.steps, to_string(lc.variant), lc.beta, last.loss, last.probe_eps_hat,
                         last.kl_to_ref);
  for (const auto& a : result.audits) {
    if (a.passed) continue;
    ctx.log << fmt::format("gradient audit failed at step {}: relative error {:.3g}\n", a.step,
                           a.relative_error);
    return kExitCertificate;
  }
  return kExitOk;
}

// ---- certify ------------------------------------------------------------------

std::vector<Field> certify_fields() {
  return {
      {"world", FieldType::Str, "", "world.json (default: built from --seed)"},
      {"seed", FieldType::Int, 0, "seed for the default world and all draws"},
      {"only", FieldType::Str, "", "comma list of gradcheck, mle, degeneracy, ed, convergence"},
      {"prompts", FieldType::Int, 8, "default world prompts"},
      {"vocab", FieldType::Int, 32, "default world responses"},
      {"gradcheck_batches", FieldType::Int, 2, "batches per variant and trick combination"},
      {"instances", FieldType::Int, 10, "degeneracy instances"},
      {"shift", FieldType::Real, -0.5, "degeneracy shift A (< 0)"},
      {"stay", FieldType::Real, 0.5, "kernel stay probability"},
      {"seeds", FieldType::Int, 50, "convergence study seeds"},
      {"positives", FieldType::Int, 64, "convergence study positives per seed"},
  };
}

int cmd_certify(Context& ctx) {
  const json& c = ctx.cfg;
  CertifyOptions o;
  o.seed = get_seed(c);
  o.gradcheck_batches = get_count(c, "gradcheck_batches");
  o.degeneracy_instances = get_count(c, "instances");
  o.degeneracy_A = get_real(c, "shift");
  o.ed_stay_prob = get_real(c, "stay");
  o.convergence_seeds = get_count(c, "seeds");
  o.convergence_positives = get_count(c, "positives");

  World world;
  if (get_str(c, "world").empty()) {
    WorldParams wp;
    wp.seed = o.seed;
    wp.prompts = get_count(c, "prompts");
    wp.responses = get_count(c, "vocab");
    world = build_world(wp);
  } else {
    world = load_world(require_input(c, "world"));
    if (const auto v = validate_world(world); !v.empty())
      fail(ErrorKind::Data, "invalid world: " + v.front());
  }

  const auto results = run_certificates(world, split_list(get_str(c, "only")), o);
  json certs = json::object();
  bool all = true;
  for (const auto& r : results) {
    certs[r.name] = {{"passed", r.passed}, {"details", r.details}};
    all = all && r.passed;
    ctx.log << fmt::format("{:<12} {}\n", r.name, r.passed ? "PASS" : "FAIL");
  }
  write_json(ctx.out / "certificates.json", {{"config_digest", ctx.digest},
                                             {"world_hash", hex64(world_hash(world))},
                                             {"all_passed", all},
                                             {"certificates", std::move(certs)}});
  write_effective_config(ctx, "certify");
  return all ? kExitOk : kExitCertificate;
}

// ---- frontier -----------------------------------------------------------------

std::vector<Field> frontier_fields() {
  std::vector<Field> f{
      {"world", FieldType::Str, "", "world.json"},
      {"data", FieldType::Str, "", "dataset.jsonl"},
      {"seed", FieldType::Int, 0, "training seed"},
      {"methods", FieldType::Str, "dpo,epa", "comma list of loss names"},
      {"betas", FieldType::Str, "0.01,0.05,0.1,0.5", "comma list of beta values"},
      {"n_weak", FieldType::Int, 2, "weak negatives for epa and epa-general"},
      {"include_reference", FieldType::Bool, false, "add the untrained reference row"},
  };
  for (auto& t : training_fields()) f.push_back(std::move(t));
  return f;
}

int cmd_frontier(Context& ctx) {
  const json& c = ctx.cfg;
  const Inputs in = load_inputs(c);
  const auto methods = split_list(get_str(c, "methods"));
  if (methods.empty()) fail(ErrorKind::Config, "--methods: empty list");
  const auto betas = parse_reals("--betas", get_str(c, "betas"));
  if (betas.empty()) fail(ErrorKind::Config, "--betas: empty list");
  const TrainConfig tc = train_config_from(c);

  std::vector<FrontierPoint> points;
  if (c.at("include_reference").get<bool>())
    points.push_back(policy_point(in.world.reference, in.world, 0.0, "reference"));
  for (const auto& m : methods) {
    LossConfig lc = loss_config_from(c, m);
    if (lc.variant == LossVariant::EpaNarrow || lc.variant == LossVariant::EpaGeneral)
      lc.n_weak = get_count(c, "n_weak");
    const auto f = kl_reward_frontier(in.world, in.dataset.records, lc, betas, tc, m);
    points.insert(points.end(), f.begin(), f.end());
  }

  std::size_t failed = 0;
  for (const auto& p : points)
    if (!p.ok) {
      ++failed;
      ctx.log << fmt::format("{} at beta={} failed: {}\n", p.method, p.beta, p.error);
    }
  write_text(ctx.out / "frontier.csv", digest_line(ctx.digest) + frontier_to_csv(points));
  write_json(ctx.out / "frontier.json",
             {{"config_digest", ctx.digest},
              {"world_hash", hex64(world_hash(in.world))},
              {"partial", failed > 0},
              {"points", to_json(std::span<const FrontierPoint>(points))}});
  write_effective_config(ctx, "frontier");
  ctx.log << fmt::format("{} frontier points written to {}\n", points.size(),
                         (ctx.out / "frontier.csv").string());
  if (failed == points.size()) return kExitConfig;
  return kExitOk;
}

// ---- probe --------------------------------------------------------------------

std::vector<Field> probe_fields() {
  return {
      {"world", FieldType::Str, "", "world.json"},
      {"policy", FieldType::Str, "", "policy.json from train"},
      {"seed", FieldType::Int, 0, "seed for response subsets"},
      {"beta", FieldType::Real, 0.1, "beta of the log-ratio reward"},
      {"responses", FieldType::Int, 0, "responses per prompt (0: whole support)"},
  };
}

int cmd_probe(Context& ctx) {
  const json& c = ctx.cfg;
  const World world = load_world(require_input(c, "world"));
  const fs::path policy_path = require_input(c, "policy");
  json pdoc;
  try {
    pdoc = json::parse(read_text(policy_path));
  } catch (const json::exception& e) {
    fail(ErrorKind::Data, policy_path.string() + ": " + e.what());
  }
  const TabularPolicy policy = policy_from_json(pdoc, world);
  const auto rep = slope1_probe(policy, world, get_real(c, "beta"), get_count(c, "responses"),
                                get_seed(c));
  write_text(ctx.out / "probe.csv", digest_line(ctx.digest) + probe_to_csv(rep));
  json doc = to_json(rep);
  doc["config_digest"] = ctx.digest;
  write_json(ctx.out / "probe.json", doc);
  write_effective_config(ctx, "probe");
  ctx.log << fmt::format("mean pearson {:.6g}, mean eps_hat {:.6g}\n", rep.mean_pearson,
                         rep.mean_eps_hat);
  return kExitOk;
}

struct Command {
  const char* name;
  const char* help;
  std::vector<Field> (*fields)();
  int (*run)(Context&);
};

const Command kCommands[] = {
    {"gen", "build a world and sample a preference dataset", gen_fields, cmd_gen},
    {"train", "train a tabular policy on a dataset", train_fields, cmd_train},
    {"certify", "run the certificate suite", certify_fields, cmd_certify},
    {"frontier", "KL-reward frontier over methods and betas", frontier_fields, cmd_frontier},
    {"probe", "slope-1 probe of a trained policy", probe_fields, cmd_probe},
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Tabular preference-alignment lab", "epalab"};
  app.require_subcommand(1);
  std::vector<std::pair<CLI::App*, std::unique_ptr<OptionSet>>> subs;
  for (const auto& cmd : kCommands) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    subs.emplace_back(sub, std::make_unique<OptionSet>(*sub, cmd.fields()));
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitConfig;
  }

  for (std::size_t i = 0; i < subs.size(); ++i) {
    if (!subs[i].first->parsed()) continue;
    try {
      const OptionSet& opts = *subs[i].second;
      const json cfg = opts.resolve();
      Context ctx{cfg, config_digest(cfg), require_out_dir(opts.out_dir()), out};
      return kCommands[i].run(ctx);
    } catch (const Error& e) {
      err << "epalab: " << to_string(e.kind()) << ": " << e.what() << '\n';
      return exit_code(e.kind());
    }
  }
  return kExitConfig;
}

}  // namespace epalab::cli

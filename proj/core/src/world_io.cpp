#include "epalab/world_io.hpp"

#include <fstream>

#include <fmt/format.h>

#include "epalab/error.hpp"
#include "epalab/numeric.hpp"

namespace epalab {

using nlohmann::json;

std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) { return fmt::format("{:016x}", v); }

namespace {

json content_json(const World& w) {
  json rewards = json::array();
  json logits = json::array();
  for (PromptId x = 0; x < w.prompts(); ++x) {
    json rrow = json::array();
    for (double r : w.rewards.row(x)) {
      if (is_neg_inf(r))
        rrow.push_back("-inf");
      else
        rrow.push_back(r);
    }
    rewards.push_back(std::move(rrow));
    json lrow = json::array();
    for (double l : w.reference.logits().row(x)) lrow.push_back(l);
    logits.push_back(std::move(lrow));
  }
  json doc = {
      {"version", kWorldFormatVersion},
      {"seed", w.seed},
      {"P", w.prompts()},
      {"V", w.vocab.size()},
      {"lengths", w.vocab.lengths},
      {"rewards", std::move(rewards)},
      {"reference_logits", std::move(logits)},
  };
  if (!w.on_topic.empty()) doc["on_topic"] = w.on_topic;
  return doc;
}

double parse_reward(const json& v) {
  if (v.is_string()) {
    if (v.get<std::string>() == "-inf") return kNegInf;
    fail(ErrorKind::Data, "reward string must be \"-inf\", got \"" + v.get<std::string>() + "\"");
  }
  if (!v.is_number()) fail(ErrorKind::Data, "reward entries must be numbers or \"-inf\"");
  return v.get<double>();
}

}  // namespace

std::string canonical_world_json(const World& world) { return content_json(world).dump(); }

std::uint64_t world_hash(const World& world) { return fnv1a64(canonical_world_json(world)); }

json world_to_json(const World& world) {
  json doc = content_json(world);
  doc["hash"] = hex64(fnv1a64(doc.dump()));
  return doc;
}

World world_from_json(const json& doc) {
  World w;
  try {
    if (doc.at("version").get<int>() != kWorldFormatVersion)
      fail(ErrorKind::Data, fmt::format("unsupported world version {}", doc.at("version").dump()));
    w.seed = doc.at("seed").get<std::uint64_t>();
    const auto P = doc.at("P").get<std::size_t>();
    const auto V = doc.at("V").get<std::size_t>();
    w.vocab.lengths = doc.at("lengths").get<std::vector<int>>();
    if (w.vocab.lengths.size() != V) fail(ErrorKind::Data, "lengths: expected V entries");
    const auto& rewards = doc.at("rewards");
    const auto& logits = doc.at("reference_logits");
    if (rewards.size() != P || logits.size() != P)
      fail(ErrorKind::Data, "rewards/reference_logits: expected P rows");
    w.rewards.values = Matrix(P, V);
    Matrix ref(P, V);
    for (std::size_t x = 0; x < P; ++x) {
      if (rewards[x].size() != V || logits[x].size() != V)
        fail(ErrorKind::Data, fmt::format("row {}: expected V entries", x));
      for (std::size_t y = 0; y < V; ++y) {
        w.rewards.values(x, y) = parse_reward(rewards[x][y]);
        ref(x, y) = logits[x][y].get<double>();
      }
    }
    w.reference = TabularPolicy(std::move(ref));
    if (doc.contains("on_topic"))
      w.on_topic = doc.at("on_topic").get<std::vector<std::vector<ResponseId>>>();
  } catch (const json::exception& e) {
    fail(ErrorKind::Data, std::string("malformed world document: ") + e.what());
  }
  if (doc.contains("hash")) {
    const auto stored = doc.at("hash").get<std::string>();
    const auto actual = hex64(world_hash(w));
    if (stored != actual)
      fail(ErrorKind::Integrity,
           fmt::format("world hash mismatch: stored {}, content hashes to {}", stored, actual));
  }
  return w;
}

void save_world(const std::filesystem::path& path, const World& world) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << world_to_json(world).dump(2) << '\n';
  if (!out) fail(ErrorKind::Io, "write failed: " + path.string());
}

World load_world(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::Data, path.string() + ": " + e.what());
  }
  return world_from_json(doc);
}

}  // namespace epalab

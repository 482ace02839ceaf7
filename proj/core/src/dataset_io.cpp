#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "epalab/datagen.hpp"
#include "epalab/error.hpp"
#include "epalab/world_io.hpp"

namespace epalab {

using nlohmann::json;

std::string dataset_to_jsonl(const Dataset& ds) {
  std::string out;
  json header = {{"version", ds.header.version},
                 {"world_hash", hex64(ds.header.world_hash)},
                 {"scheme", ds.header.scheme},
                 {"seed", ds.header.seed}};
  if (!ds.header.config_digest.empty()) header["config_digest"] = ds.header.config_digest;
  out += header.dump();
  out += '\n';
  for (const auto& rec : ds.records) {
    json line = {{"prompt_id", rec.prompt}, {"winner_id", rec.winner}, {"strong", rec.strong}};
    if (rec.weak_n > 0)
      line["weak_n"] = rec.weak_n;
    else
      line["weak"] = rec.weak;
    out += line.dump();
    out += '\n';
  }
  return out;
}

Dataset dataset_from_jsonl(const std::string& text) {
  Dataset ds;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  try {
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const json j = json::parse(line);
      if (!have_header) {
        ds.header.version = j.at("version").get<int>();
        ds.header.world_hash = std::stoull(j.at("world_hash").get<std::string>(), nullptr, 16);
        ds.header.scheme = j.at("scheme").get<std::string>();
        ds.header.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("config_digest"))
          ds.header.config_digest = j.at("config_digest").get<std::string>();
        have_header = true;
        continue;
      }
      PreferenceRecord rec;
      rec.prompt = j.at("prompt_id").get<std::size_t>();
      rec.winner = j.at("winner_id").get<std::size_t>();
      rec.strong = j.at("strong").get<std::vector<ResponseId>>();
      if (j.contains("weak")) rec.weak = j.at("weak").get<std::vector<ResponseId>>();
      if (j.contains("weak_n")) rec.weak_n = j.at("weak_n").get<std::size_t>();
      ds.records.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Data, fmt::format("dataset line {}: {}", lineno, e.what()));
  } catch (const std::invalid_argument&) {
    fail(ErrorKind::Data, fmt::format("dataset line {}: world_hash is not hexadecimal", lineno));
  }
  if (!have_header) fail(ErrorKind::Data, "dataset is empty (no header line)");
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& rec = ds.records[i];
    for (auto y : rec.strong)
      if (y == rec.winner)
        fail(ErrorKind::Data, fmt::format("record {}: winner appears among strong negatives", i));
    for (auto y : rec.weak)
      if (y == rec.winner)
        fail(ErrorKind::Data, fmt::format("record {}: winner appears among weak negatives", i));
  }
  return ds;
}

void save_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << dataset_to_jsonl(dataset);
  if (!out) fail(ErrorKind::Io, "write failed: " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return dataset_from_jsonl(buf.str());
}

}  // namespace epalab

#include "options.hpp"

#include <algorithm>
#include <fstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "epalab/error.hpp"
#include "epalab/world_io.hpp"

namespace epalab::cli {

using nlohmann::json;

namespace {

std::string flag_name(const std::string& key) {
  std::string f = key;
  std::replace(f.begin(), f.end(), '_', '-');
  return "--" + f;
}

const char* type_name(FieldType t) {
  switch (t) {
    case FieldType::Int: return "an integer";
    case FieldType::Real: return "a number";
    case FieldType::Str: return "a string";
    case FieldType::Bool: return "a boolean";
  }
  return "?";
}

json parse_flag(const Field& f, const std::string& text) {
  const auto bad = [&] {
    fail(ErrorKind::Config,
         fmt::format("{}: expected {}, got '{}'", flag_name(f.key), type_name(f.type), text));
  };
  try {
    std::size_t used = 0;
    switch (f.type) {
      case FieldType::Int: {
        const long long v = std::stoll(text, &used);
        if (used != text.size()) bad();
        return v;
      }
      case FieldType::Real: {
        const double v = std::stod(text, &used);
        if (used != text.size()) bad();
        return v;
      }
      case FieldType::Str: return text;
      case FieldType::Bool: return text == "true" || text == "1";
    }
  } catch (const std::logic_error&) {
    bad();
  }
  return nullptr;
}

bool type_matches(FieldType t, const json& v) {
  switch (t) {
    case FieldType::Int: return v.is_number_integer();
    case FieldType::Real: return v.is_number();
    case FieldType::Str: return v.is_string();
    case FieldType::Bool: return v.is_boolean();
  }
  return false;
}

}  // namespace

OptionSet::OptionSet(CLI::App& app, std::vector<Field> fields) : fields_(std::move(fields)) {
  app.add_option("--config", config_path_, "JSON config file; flags override its fields");
  app.add_option("--out", out_, "output directory (must exist)");
  for (const auto& f : fields_) {
    handles_[f.key] = f.type == FieldType::Bool
                          ? app.add_flag(flag_name(f.key), flags_[f.key], f.help)
                          : app.add_option(flag_name(f.key), raw_[f.key], f.help);
  }
}

json OptionSet::resolve() const {
  json cfg = json::object();
  for (const auto& f : fields_) cfg[f.key] = f.fallback;

  if (!config_path_.empty()) {
    std::ifstream in(config_path_, std::ios::binary);
    if (!in) fail(ErrorKind::Config, "cannot open config file " + config_path_);
    json file;
    try {
      file = json::parse(in);
    } catch (const json::exception& e) {
      fail(ErrorKind::Config, config_path_ + ": " + e.what());
    }
    if (!file.is_object()) fail(ErrorKind::Config, config_path_ + ": expected a JSON object");
    for (const auto& [key, value] : file.items()) {
      const auto it = std::find_if(fields_.begin(), fields_.end(),
                                   [&](const Field& f) { return f.key == key; });
      if (it == fields_.end()) {
        if (key == "command" || key == "config_digest") continue;
        fail(ErrorKind::Config, fmt::format("config field '{}': unknown field", key));
      }
      if (!type_matches(it->type, value))
        fail(ErrorKind::Config,
             fmt::format("config field '{}': expected {}", key, type_name(it->type)));
      cfg[key] = it->type == FieldType::Real ? json(value.get<double>()) : value;
    }
  }

  for (const auto& f : fields_) {
    if (handles_.at(f.key)->count() == 0) continue;
    cfg[f.key] = f.type == FieldType::Bool ? json(flags_.at(f.key)) : parse_flag(f, raw_.at(f.key));
  }
  return cfg;
}

std::string config_digest(const json& effective) { return hex64(fnv1a64(effective.dump())); }

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t comma = s.find(',', start);
    const std::size_t end = comma == std::string::npos ? s.size() : comma;
    std::string item = s.substr(start, end - start);
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::vector<double> parse_reals(const std::string& key, const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      fail(ErrorKind::Config, fmt::format("{}: '{}' is not a number", key, item));
    }
  }
  return out;
}

}  // namespace epalab::cli

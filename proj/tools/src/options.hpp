#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace CLI {
class App;
class Option;
}

namespace epalab::cli {

enum class FieldType { Int, Real, Str, Bool };

struct Field {
  std::string key;  // config-file key; the flag is "--" + key with '_' -> '-'
  FieldType type;
  nlohmann::json fallback;
  std::string help;
};

// Binds one subcommand's fields to CLI11 and resolves the effective config:
// defaults, then the --config file, then explicit flags.
class OptionSet {
 public:
  OptionSet(CLI::App& app, std::vector<Field> fields);

  nlohmann::json resolve() const;
  const std::string& out_dir() const { return out_; }

 private:
  std::vector<Field> fields_;
  std::map<std::string, std::string> raw_;
  std::map<std::string, bool> flags_;
  std::map<std::string, CLI::Option*> handles_;
  std::string config_path_;
  std::string out_;
};

std::string config_digest(const nlohmann::json& effective);

std::vector<std::string> split_list(const std::string& s);
std::vector<double> parse_reals(const std::string& key, const std::string& s);

}  // namespace epalab::cli

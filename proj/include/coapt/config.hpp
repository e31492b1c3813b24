#pragma once

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "coapt/classifier.hpp"
#include "coapt/encoders.hpp"
#include "coapt/trainer.hpp"

namespace coapt {

enum class Geometry {
  aligned,    // image clusters sit near the text feature of a class concept
  symmetric,  // clusters orthogonal to every untrained text feature
};

enum class ImageInput { features, tokens };

/// Everything a harness run needs. Defaults describe the toy setting.
struct ExperimentConfig {
  // data
  Geometry geometry = Geometry::aligned;
  ImageInput image_input = ImageInput::features;
  std::size_t num_classes = 6;
  std::size_t target_classes = 4;
  std::size_t shots = 16;
  std::size_t queries = 50;  // per class
  std::size_t image_tokens = 6;
  double cluster_spread = 0.5;
  double attr_correlation = 0.9;
  std::size_t words_per_set = 32;
  std::size_t num_sets = 3;

  // prompts and scoring
  std::size_t num_attrs = 4;
  std::size_t k_ensemble = 3;
  std::size_t soft_prompts = 4;
  std::size_t vision_prompts = 0;
  PromptInit prompt_init = PromptInit::gaussian;
  std::string init_phrase = "a photo of a";
  std::size_t meta_hidden = 0;
  EncoderDims dims;
  ClassifierConfig classifier;

  // optimization
  OptimConfig optim;
  std::size_t warmup_epochs = 1;

  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<double> domain_shifts{0.0, 0.5, 1.0, 2.0};
  std::vector<std::size_t> sweep_counts{0, 4, 8, 16, 32};

  // optional external inputs
  std::string vocab_path;
  std::string target_vocab_path;
  std::string token_embeddings;
  std::string image_embeddings;

  void validate() const;
  std::map<std::string, std::string> echo() const;
  void set(const std::string& key, const std::string& value);
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last) throw ConfigError("key '" + key + "': cannot parse '" + value + "'");
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& value) {
  std::vector<T> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(parse_number<T>(key, item));
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

inline void ExperimentConfig::set(const std::string& key, const std::string& value) {
  using detail::parse_list;
  using detail::parse_number;
  auto size = [&] { return parse_number<std::size_t>(key, value); };
  auto real = [&] { return parse_number<double>(key, value); };

  if (key == "geometry") {
    if (value == "aligned") geometry = Geometry::aligned;
    else if (value == "symmetric") geometry = Geometry::symmetric;
    else throw ConfigError("key 'geometry': expected aligned or symmetric, got '" + value + "'");
  } else if (key == "image_input") {
    if (value == "features") image_input = ImageInput::features;
    else if (value == "tokens") image_input = ImageInput::tokens;
    else throw ConfigError("key 'image_input': expected features or tokens, got '" + value + "'");
  } else if (key == "num_classes") num_classes = size();
  else if (key == "target_classes") target_classes = size();
  else if (key == "shots") shots = size();
  else if (key == "queries") queries = size();
  else if (key == "image_tokens") image_tokens = size();
  else if (key == "cluster_spread") cluster_spread = real();
  else if (key == "attr_correlation") attr_correlation = real();
  else if (key == "words_per_set") words_per_set = size();
  else if (key == "num_sets") num_sets = size();
  else if (key == "num_attrs") num_attrs = size();
  else if (key == "k_ensemble") k_ensemble = size();
  else if (key == "soft_prompts") soft_prompts = size();
  else if (key == "vision_prompts") vision_prompts = size();
  else if (key == "prompt_init") {
    if (value == "gaussian") prompt_init = PromptInit::gaussian;
    else if (value == "phrase") prompt_init = PromptInit::phrase;
    else throw ConfigError("key 'prompt_init': expected gaussian or phrase, got '" + value + "'");
  } else if (key == "init_phrase") init_phrase = value;
  else if (key == "meta_hidden") meta_hidden = size();
  else if (key == "dim") dims.dim = size();
  else if (key == "depth") dims.depth = size();
  else if (key == "heads") dims.heads = size();
  else if (key == "ctx_len") dims.ctx_len = size();
  else if (key == "image_dim") dims.image_dim = size();
  else if (key == "temperature") classifier.temperature = real();
  else if (key == "bias_mode") classifier.bias_mode = parse_bias_mode(value);
  else if (key == "lr") optim.base_lr = real();
  else if (key == "momentum") optim.momentum = real();
  else if (key == "batch_size") optim.batch_size = size();
  else if (key == "steps") optim.total_steps = size();
  else if (key == "warmup_epochs") warmup_epochs = size();
  else if (key == "seeds") seeds = parse_list<std::uint64_t>(key, value);
  else if (key == "domain_shifts") domain_shifts = parse_list<double>(key, value);
  else if (key == "sweep_counts") sweep_counts = parse_list<std::size_t>(key, value);
  else if (key == "vocab") vocab_path = value;
  else if (key == "target_vocab") target_vocab_path = value;
  else if (key == "token_embeddings") token_embeddings = value;
  else if (key == "image_embeddings") image_embeddings = value;
  else throw ConfigError("unknown config key '" + key + "'");
}

inline void ExperimentConfig::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (shots == 0) throw ConfigError("shots must be positive");
  if (queries == 0) throw ConfigError("queries must be positive");
  if (!(cluster_spread >= 0.0)) throw ConfigError("cluster_spread must be non-negative");
  if (!(attr_correlation >= 0.0 && attr_correlation <= 1.0)) throw ConfigError("attr_correlation must lie in [0, 1]");
  if (num_sets == 0) throw ConfigError("num_sets must be at least 1");
  if (k_ensemble == 0) throw ConfigError("k_ensemble must be at least 1");
  if (vision_prompts && image_input != ImageInput::tokens)
    throw ConfigError("vision prompts need image_input = tokens");
  if (image_input == ImageInput::tokens && image_tokens == 0) throw ConfigError("image_tokens must be positive");
  if (image_input == ImageInput::tokens && geometry == Geometry::symmetric)
    throw ConfigError("symmetric geometry is defined on feature inputs only");
  if (dims.dim == 0 || dims.heads == 0 || dims.dim % dims.heads)
    throw ConfigError("dim must be a positive multiple of heads");
  if (optim.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(optim.base_lr >= 0.0)) throw ConfigError("lr must be non-negative");
  if (seeds.empty()) throw ConfigError("seeds must list at least one seed");
  classifier.validate();
}

inline std::map<std::string, std::string> ExperimentConfig::echo() const {
  using detail::fmt;
  std::map<std::string, std::string> e;
  e["geometry"] = geometry == Geometry::aligned ? "aligned" : "symmetric";
  e["image_input"] = image_input == ImageInput::features ? "features" : "tokens";
  e["num_classes"] = std::to_string(num_classes);
  e["target_classes"] = std::to_string(target_classes);
  e["shots"] = std::to_string(shots);
  e["queries"] = std::to_string(queries);
  e["image_tokens"] = std::to_string(image_tokens);
  e["cluster_spread"] = fmt(cluster_spread);
  e["attr_correlation"] = fmt(attr_correlation);
  e["words_per_set"] = std::to_string(words_per_set);
  e["num_sets"] = std::to_string(num_sets);
  e["num_attrs"] = std::to_string(num_attrs);
  e["k_ensemble"] = std::to_string(k_ensemble);
  e["soft_prompts"] = std::to_string(soft_prompts);
  e["vision_prompts"] = std::to_string(vision_prompts);
  e["prompt_init"] = prompt_init == PromptInit::gaussian ? "gaussian" : "phrase";
  e["init_phrase"] = init_phrase;
  e["meta_hidden"] = std::to_string(meta_hidden);
  e["dim"] = std::to_string(dims.dim);
  e["depth"] = std::to_string(dims.depth);
  e["heads"] = std::to_string(dims.heads);
  e["ctx_len"] = std::to_string(dims.ctx_len);
  e["image_dim"] = std::to_string(dims.image_dim);
  e["temperature"] = fmt(classifier.temperature);
  e["bias_mode"] = to_string(classifier.bias_mode);
  e["lr"] = fmt(optim.base_lr);
  e["momentum"] = fmt(optim.momentum);
  e["batch_size"] = std::to_string(optim.batch_size);
  e["steps"] = std::to_string(optim.total_steps);
  e["warmup_epochs"] = std::to_string(warmup_epochs);
  e["seeds"] = detail::join(seeds);
  e["domain_shifts"] = detail::join(domain_shifts);
  e["sweep_counts"] = detail::join(sweep_counts);
  if (!vocab_path.empty()) e["vocab"] = vocab_path;
  if (!target_vocab_path.empty()) e["target_vocab"] = target_vocab_path;
  if (!token_embeddings.empty()) e["token_embeddings"] = token_embeddings;
  if (!image_embeddings.empty()) e["image_embeddings"] = image_embeddings;
  return e;
}

/// `key = value` lines; `#` starts a comment; blank lines ignored.
inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig cfg = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    try {
      cfg.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig cfg = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(cfg));
}

}  // namespace coapt

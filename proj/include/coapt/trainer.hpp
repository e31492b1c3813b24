#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "coapt/classifier.hpp"
#include "coapt/embedding_io.hpp"

namespace coapt {

struct OptimConfig {
  double base_lr = 2e-3;
  double momentum = 0.9;
  std::size_t batch_size = 4;
  std::size_t total_steps = 200;
  std::size_t warmup_steps = 0;
};

/// Linear warmup to `base_lr`, then half-cosine decay to zero at `total_steps`.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr, std::size_t warmup_steps) {
  if (step > total_steps) step = total_steps;
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return 0.0;  // only reachable at step == total
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Everything that changes during training.
struct TrainState {
  SoftPromptBank bank;
  MetaNetParams meta;
  std::vector<std::vector<double>> velocity;  // one buffer per trainable(), same order
  std::uint64_t step = 0;
  std::uint64_t seed = 0;

  /// Text prompts, vision prompts, then meta-net tensors; absent ones skipped.
  std::vector<Tensor> trainables() const {
    auto out = bank.trainables();
    for (const auto& t : meta.trainables())
      if (t.defined()) out.push_back(t);
    return out;
  }

  std::uint64_t bank_checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& t : bank.trainables()) h = coapt::checksum(t, h);
    return h;
  }

  TrainState clone() const {
    TrainState s;
    s.bank = bank.clone();
    s.meta = meta.clone();
    s.velocity = velocity;
    s.step = step;
    s.seed = seed;
    return s;
  }
};

inline TrainState make_train_state(SoftPromptBank bank, MetaNetParams meta, std::uint64_t seed) {
  TrainState s;
  s.bank = std::move(bank);
  s.meta = std::move(meta);
  s.seed = seed;
  for (const auto& t : s.trainables()) s.velocity.emplace_back(t.numel(), 0.0);
  return s;
}

struct Batch {
  std::vector<Tensor> inputs;  // image tokens or [1×d] features
  std::vector<std::size_t> labels;
};

/// Mean cross-entropy of the adapted distributions over a batch. Text
/// features are computed once and shared by every image in the batch.
inline Tensor batch_loss(const Scorer& scorer, const TrainState& state, const Batch& batch,
                         const std::vector<AssembledQuery>& queries) {
  if (batch.inputs.empty() || batch.inputs.size() != batch.labels.size())
    throw ConfigError("batch needs matching, non-empty inputs and labels");
  Tensor text = scorer.text_features(queries, state.bank);
  std::vector<Tensor> rows;
  rows.reserve(batch.inputs.size());
  for (const auto& x : batch.inputs)
    rows.push_back(scorer.probabilities(scorer.image_feature(x, state.bank), text, queries, state.bank, state.meta));
  Tensor probs = rows.size() == 1 ? rows.front() : ops::concat_rows(rows);
  return cross_entropy_loss(probs, batch.labels);
}

struct StepResult {
  double loss = 0.0;
  double lr = 0.0;
};

/// One momentum-SGD step on the soft prompts and meta-net. The learning rate
/// for the k-th step (1-based) is cosine_lr(k, total, base, warmup). Frozen
/// encoder weights are never touched. A non-finite loss throws
/// DivergenceError before any update, leaving `state` at its last good value.
inline StepResult train_step(TrainState& state, const Batch& batch, const std::vector<AssembledQuery>& queries,
                             const Scorer& scorer, const OptimConfig& opt) {
  auto params = state.trainables();
  if (params.size() != state.velocity.size()) throw IntegrityError("optimizer state does not match trainables");

  GradTape tape;
  Gradients grads;
  double loss_value = 0.0;
  {
    TapeScope scope(tape);
    Tensor loss = batch_loss(scorer, state, batch, queries);
    loss_value = loss.item();
    if (!std::isfinite(loss_value))
      throw DivergenceError("non-finite loss at step " + std::to_string(state.step));
    if (loss.requires_grad()) grads = tape.backward(loss);
  }

  const std::size_t k = static_cast<std::size_t>(state.step) + 1;
  const double lr = cosine_lr(std::min(k, opt.total_steps), opt.total_steps, opt.base_lr, opt.warmup_steps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads.contains(params[i])) continue;
    const auto g = grads.at(params[i]).data();
    auto& v = state.velocity[i];
    auto w = params[i].mutable_data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = opt.momentum * v[j] + g[j];
      w[j] -= lr * v[j];
    }
  }
  ++state.step;
  return {loss_value, lr};
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   magic "COAPTCKPT" | u32 version | u8 value bytes (8)
//   u32 d | u32 M | u32 d_v | u32 M_v | u32 meta_dim | u32 hidden | u32 out_dim | u8 init_mode
//   u64 step | u64 seed
//   f64 blocks: text prompts, vision prompts, w1, b1, w2, b2, then one velocity
//   block per trainable in the same order
//   u32 config_len | config bytes ("key=value\n" lines, UTF-8)

inline constexpr char kCheckpointMagic[9] = {'C', 'O', 'A', 'P', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using ConfigEcho = std::map<std::string, std::string>;

inline std::string serialize_checkpoint(const TrainState& s, const ConfigEcho& config = {}) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint8_t>(out, 8);
  const auto& b = s.bank;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(b.count() ? b.text.cols() : s.meta.dim));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(b.count()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(b.vision_count() ? b.vision.cols() : 0));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(b.vision_count()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.meta.dim));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.meta.hidden));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.meta.out_dim));
  detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(b.init_mode));
  detail::put_le<std::uint64_t>(out, s.step);
  detail::put_le<std::uint64_t>(out, s.seed);
  auto put_block = [&](std::span<const double> v) {
    for (double x : v) detail::put_le<double>(out, x);
  };
  if (b.count()) put_block(b.text.data());
  if (b.vision_count()) put_block(b.vision.data());
  for (const auto& t : s.meta.trainables()) put_block(t.data());
  for (const auto& v : s.velocity) put_block(v);
  std::string cfg;
  for (const auto& [k, v] : config) cfg += k + "=" + v + "\n";
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  return out;
}

struct LoadedCheckpoint {
  TrainState state;
  ConfigEcho config;
};

/// Parses a checkpoint. `expected_dim`, when set, must equal the stored
/// prompt and meta-net width.
inline LoadedCheckpoint parse_checkpoint(std::string_view bytes, std::optional<std::size_t> expected_dim = {}) {
  detail::ByteReader in(bytes);
  auto magic = in.bytes(sizeof(kCheckpointMagic), "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw FormatError("bad magic, not a COAPTCKPT file", 0);
  const auto version_at = in.pos();
  if (auto v = in.get<std::uint32_t>("version"); v != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(v), version_at);
  const auto prec_at = in.pos();
  if (auto p = in.get<std::uint8_t>("precision"); p != 8)
    throw FormatError("unsupported value width " + std::to_string(p), prec_at);
  const auto dims_at = in.pos();
  const std::size_t d = in.get<std::uint32_t>("dims");
  const std::size_t m = in.get<std::uint32_t>("dims");
  const std::size_t dv = in.get<std::uint32_t>("dims");
  const std::size_t mv = in.get<std::uint32_t>("dims");
  const std::size_t md = in.get<std::uint32_t>("dims");
  const std::size_t hidden = in.get<std::uint32_t>("dims");
  const std::size_t out_dim = in.get<std::uint32_t>("dims");
  const auto init_mode = in.get<std::uint8_t>("dims");
  if (expected_dim && (d != *expected_dim || md != *expected_dim))
    throw FormatError("checkpoint width " + std::to_string(d) + " does not match engine width " +
                          std::to_string(*expected_dim),
                      dims_at);
  if (md == 0 || hidden == 0 || (out_dim != md && out_dim != 2 * md) || init_mode > 1)
    throw FormatError("inconsistent checkpoint dimensions", dims_at);

  LoadedCheckpoint ck;
  auto& s = ck.state;
  s.step = in.get<std::uint64_t>("step");
  s.seed = in.get<std::uint64_t>("seed");
  auto get_block = [&](std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = in.get<double>("parameter block");
    return v;
  };
  s.bank.init_mode = static_cast<PromptInit>(init_mode);
  if (m) s.bank.text = Tensor({m, d}, get_block(m * d), true);
  if (mv) s.bank.vision = Tensor({mv, dv}, get_block(mv * dv), true);
  s.meta.dim = md;
  s.meta.hidden = hidden;
  s.meta.out_dim = out_dim;
  s.meta.w1 = Tensor({2 * md, hidden}, get_block(2 * md * hidden), true);
  s.meta.b1 = Tensor({1, hidden}, get_block(hidden), true);
  s.meta.w2 = Tensor({hidden, out_dim}, get_block(hidden * out_dim), true);
  s.meta.b2 = Tensor({1, out_dim}, get_block(out_dim), true);
  for (const auto& t : s.trainables()) s.velocity.push_back(get_block(t.numel()));
  const auto len = in.get<std::uint32_t>("config length");
  std::string cfg(in.bytes(len, "config block"));
  std::size_t start = 0;
  while (start < cfg.size()) {
    auto nl = cfg.find('\n', start);
    if (nl == std::string::npos) nl = cfg.size();
    auto line = cfg.substr(start, nl - start);
    auto eq = line.find('=');
    if (eq != std::string::npos) ck.config[line.substr(0, eq)] = line.substr(eq + 1);
    start = nl + 1;
  }
  if (!in.done()) throw FormatError("trailing bytes after config block", in.pos());
  return ck;
}

inline void save_checkpoint(const TrainState& s, const std::string& path, const ConfigEcho& config = {}) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint " + path);
  const auto bytes = serialize_checkpoint(s, config);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline LoadedCheckpoint load_checkpoint(const std::string& path, std::optional<std::size_t> expected_dim = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, expected_dim);
}

}  // namespace coapt

#include "retovla/policy.hpp"

#include <algorithm>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "retovla/binio.hpp"

namespace retovla {

namespace {

constexpr std::uint64_t kRegisterSeedMix = 0x9E3779B97F4A7C15ULL;
constexpr char kMagic[4] = {'R', 'T', 'V', 'L'};

struct Field {
  const char* key;
  std::size_t ModelConfig::*member;
};

constexpr Field kFields[] = {
    {"d_model", &ModelConfig::d_model},
    {"n_heads", &ModelConfig::n_heads},
    {"backbone_depth", &ModelConfig::backbone_depth},
    {"expert_depth", &ModelConfig::expert_depth},
    {"registers", &ModelConfig::registers},
    {"patch_count", &ModelConfig::patch_count},
    {"action_horizon", &ModelConfig::action_horizon},
    {"action_dim", &ModelConfig::action_dim},
    {"flow_steps", &ModelConfig::flow_steps},
    {"vocab", &ModelConfig::vocab},
    {"instruction_len", &ModelConfig::instruction_len},
    {"state_dim", &ModelConfig::state_dim},
};

}  // namespace

void ModelConfig::validate() const {
  for (const Field& f : kFields) {
    if (f.member != &ModelConfig::registers && this->*f.member == 0) {
      throw std::invalid_argument(std::string("model config: ") + f.key + " must be >= 1");
    }
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                                std::to_string(n_heads));
  }
  if (instruction_len > 8) throw std::invalid_argument("model config: instruction_len must be <= 8");
}

std::string ModelConfig::to_text() const {
  std::ostringstream out;
  for (const Field& f : kFields) out << f.key << " = " << this->*f.member << '\n';
  return out.str();
}

bool ModelConfig::apply(const ConfigEntry& entry) {
  for (const Field& f : kFields) {
    if (entry.key == f.key) {
      this->*f.member = parse_count(entry);
      return true;
    }
  }
  return false;
}

ModelConfig ModelConfig::from_text(std::string_view text) {
  ModelConfig c;
  for (const auto& e : parse_kv_config(text)) {
    if (!c.apply(e)) throw ConfigError("line " + std::to_string(e.line) + ": unknown model key '" + e.key + "'");
  }
  c.validate();
  return c;
}

PolicyModel::PolicyModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> tok(0.0, 1.0);
  std::vector<double> table(config_.vocab * d);
  for (double& v : table) v = tok(rng);
  token_embedding_ = store_.add("backbone.token_embedding", {config_.vocab, d}, std::move(table));
  state_embedding_ = make_linear(store_, "backbone.state_embedding", config_.state_dim, d, true, rng);
  for (std::size_t i = 0; i < config_.backbone_depth; ++i) {
    encoder_.push_back(make_encoder_block(store_, "backbone.block" + std::to_string(i), d, config_.n_heads, rng));
  }
  encoder_norm_ = make_layernorm(store_, "backbone.norm", d);
  action_embedding_ = make_linear(store_, "expert.action_embedding", config_.action_dim, d, true, rng);
  for (std::size_t i = 0; i < config_.expert_depth; ++i) {
    decoder_.push_back(make_decoder_block(store_, "expert.block" + std::to_string(i), d, config_.n_heads, rng));
  }
  head_norm_ = make_layernorm(store_, "expert.head_norm", d);
  head_ = make_linear(store_, "expert.head", d, config_.action_dim, true, rng);

  // Separate stream so that shared weights do not depend on K.
  if (config_.registers > 0) {
    std::mt19937_64 reg_rng(seed ^ kRegisterSeedMix);
    RegisterPath path;
    path.bank = make_register_bank(store_, "registers.bank", config_.registers, config_.d_vlm(), config_.n_heads,
                                   reg_rng);
    path.projection = make_register_projection(store_, "registers.projection", config_.d_vlm(), d, config_.n_heads,
                                               reg_rng);
    path.gate = make_gate(store_, "registers.gate");
    registers_ = std::move(path);
  }
}

double PolicyModel::gate_sigma() const { return registers_ ? registers_->gate.sigma() : 0.0; }

ConditionBundle encode_condition(const SceneBatch& batch, const PolicyModel& model) {
  const ModelConfig& c = model.config();
  const Tensor& p = batch.patches;
  if (p.rank() != 3 || p.dim(1) != c.patch_count || p.dim(2) != c.d_vlm()) {
    throw ShapeError("encode_condition: patches " + shape_str(p.shape()) + " do not match [B, " +
                     std::to_string(c.patch_count) + ", " + std::to_string(c.d_vlm()) + "]");
  }
  const std::size_t B = p.dim(0);
  if (batch.instructions.size() != B * c.instruction_len) {
    throw ShapeError("encode_condition: expected " + std::to_string(B * c.instruction_len) + " instruction tokens, got " +
                     std::to_string(batch.instructions.size()));
  }
  if (batch.state.shape() != Shape{B, c.state_dim}) {
    throw ShapeError("encode_condition: state " + shape_str(batch.state.shape()) + " does not match [B, " +
                     std::to_string(c.state_dim) + "]");
  }
  for (std::size_t id : batch.instructions) {
    if (id >= c.vocab) {
      throw std::out_of_range("encode_condition: token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(c.vocab));
    }
  }

  Tensor tokens = embedding(model.token_embedding(), batch.instructions, {B, c.instruction_len});
  Tensor state = reshape(linear(batch.state, model.state_embedding()), {B, 1, c.d_model});
  Tensor x = concat(concat(p, tokens, 1), state, 1);
  x = add(x, positional_encoding(c.context_length(), c.d_model));
  for (const auto& blk : model.encoder()) x = encoder_block(x, blk);

  ConditionBundle out;
  out.context = layernorm(x, model.encoder_norm());
  if (model.has_registers()) out.registers = aggregate_scene(p, model.registers()->bank);
  return out;
}

Tensor predict_field(const PolicyModel& model, const Tensor& a_t, std::span<const double> t,
                     const ConditionBundle& cond, AttentionTrace* final_cross_trace) {
  const ModelConfig& c = model.config();
  const std::size_t B = cond.context.dim(0), H = c.action_horizon, d = c.d_model;
  if (a_t.shape() != Shape{B, H, c.action_dim}) {
    throw ShapeError("predict_field: action chunk " + shape_str(a_t.shape()) + " does not match [" + std::to_string(B) +
                     ", " + std::to_string(H) + ", " + std::to_string(c.action_dim) + "]");
  }
  if (t.size() != B && t.size() != 1) {
    throw ShapeError("predict_field: " + std::to_string(t.size()) + " times for batch of " + std::to_string(B));
  }
  if (cond.registers.has_value() != model.has_registers()) {
    throw std::invalid_argument("predict_field: condition registers do not match the model");
  }

  // Positional and time embedding, folded into one constant per sample.
  Tensor pe = positional_encoding(H, d);
  std::vector<double> bias(B * H * d);
  for (std::size_t b = 0; b < B; ++b) {
    Tensor te = time_embedding(t.size() == 1 ? t[0] : t[b], d);
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t j = 0; j < d; ++j) bias[(b * H + h) * d + j] = pe.data()[h * d + j] + te.data()[j];
  }
  Tensor x = add(linear(a_t, model.action_embedding()), Tensor({B, H, d}, std::move(bias)));

  std::optional<AttentionKV> reg_kv;
  if (model.has_registers()) {
    const RegisterPath& path = *model.registers();
    reg_kv = gate_registers(project_registers(*cond.registers, path.projection), path.gate);
  }
  const auto& blocks = model.decoder();
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const bool last = i + 1 == blocks.size();
    x = decoder_block(x, cond.context, blocks[i], last ? reg_kv : std::nullopt, last ? final_cross_trace : nullptr);
  }
  return linear(layernorm(x, model.head_norm()), model.head());
}

std::size_t count_parameters(const PolicyModel& model) { return model.parameters().scalar_count(); }

std::size_t register_parameter_count(const ModelConfig& c) {
  if (c.registers == 0) return 0;
  const std::size_t D = c.d_vlm();
  const std::size_t aggregator = 4 * D * D + D;
  const std::size_t projection = 2 * D * c.d_model;
  return c.registers * D + aggregator + projection + 1;
}

std::vector<unsigned char> serialize_checkpoint(const PolicyModel& model, std::size_t step) {
  binio::Writer w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put_string(model.config().to_text() + "step = " + std::to_string(step) + "\n");
  const ParameterStore& store = model.parameters();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(store.size()));
  store.for_each([&](const std::string& name, const Tensor& t) {
    w.put_string(name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t dim : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(dim));
    for (double v : t.data()) w.put<float>(static_cast<float>(v));
  });
  return std::move(w.bytes());
}

LoadedCheckpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes) {
  binio::Reader r(bytes.data(), bytes.size());
  char magic[4];
  r.get_bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kMagic)) throw CheckpointError("checkpoint: bad magic (expected RTVL)");
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  ModelConfig config;
  std::size_t step = 0;
  for (const auto& e : parse_kv_config(r.get_string())) {
    if (e.key == "step") {
      step = parse_count(e);
    } else if (!config.apply(e)) {
      throw CheckpointError("checkpoint: unknown config key '" + e.key + "'");
    }
  }

  LoadedCheckpoint out{PolicyModel(config, 0), step};
  ParameterStore& store = out.model.parameters();
  const auto count = r.get<std::uint32_t>();
  if (count != store.size()) {
    throw CheckpointError("checkpoint: " + std::to_string(count) + " parameters, model expects " +
                          std::to_string(store.size()));
  }
  std::set<std::string> loaded;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.get_string();
    if (!store.contains(name)) throw CheckpointError("checkpoint: unexpected parameter '" + name + "'");
    if (!loaded.insert(name).second) throw CheckpointError("checkpoint: duplicate parameter '" + name + "'");
    Tensor& t = store.at(name);
    Shape shape(r.get<std::uint8_t>());
    for (auto& dim : shape) dim = r.get<std::uint32_t>();
    if (shape != t.shape()) {
      throw CheckpointError("checkpoint: parameter '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                            shape_str(t.shape()));
    }
    std::vector<float> payload(t.numel());
    r.get_bytes(payload.data(), payload.size() * sizeof(float));
    auto dst = t.mutable_data();
    std::copy(payload.begin(), payload.end(), dst.begin());
  }
  if (r.remaining() != 0) throw CheckpointError("checkpoint: trailing bytes after parameters");
  return out;
}

void save_checkpoint(const PolicyModel& model, std::size_t step, const std::string& path) {
  binio::write_file(path, serialize_checkpoint(model, step));
}

LoadedCheckpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(binio::read_file(path)); }

}  // namespace retovla

#include "mtlforge/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mtlforge/error.hpp"
#include "mtlforge/numerics/ops.hpp"

namespace mtlforge::model {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using json = nlohmann::ordered_json;
namespace ops = numerics;

namespace {

constexpr char kMagic[8] = {'M', 'T', 'L', 'F', 'C', 'K', 'P', 'T'};
constexpr std::uint8_t kDtypeF64 = 1;

std::string layer_prefix(std::size_t l) { return "layer" + std::to_string(l) + "."; }

struct ParamSpec {
  std::string name;
  numerics::Shape shape;
  enum Init { Embedding, Linear, Zeros, Ones } init;
};

std::vector<ParamSpec> encoder_specs(const EncoderConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff;
  std::vector<ParamSpec> specs{{"embed.tok", {c.vocab_size, d}, ParamSpec::Embedding},
                               {"embed.pos", {c.max_len, d}, ParamSpec::Embedding}};
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    specs.push_back({p + "ln1.g", {d}, ParamSpec::Ones});
    specs.push_back({p + "ln1.b", {d}, ParamSpec::Zeros});
    for (const char* m : {"q", "k", "v", "o"}) {
      specs.push_back({p + "attn.w" + m, {d, d}, ParamSpec::Linear});
      specs.push_back({p + "attn.b" + m, {d}, ParamSpec::Zeros});
    }
    specs.push_back({p + "ln2.g", {d}, ParamSpec::Ones});
    specs.push_back({p + "ln2.b", {d}, ParamSpec::Zeros});
    specs.push_back({p + "ffn.w1", {d, f}, ParamSpec::Linear});
    specs.push_back({p + "ffn.b1", {f}, ParamSpec::Zeros});
    specs.push_back({p + "ffn.w2", {f, d}, ParamSpec::Linear});
    specs.push_back({p + "ffn.b2", {d}, ParamSpec::Zeros});
  }
  specs.push_back({"final_ln.g", {d}, ParamSpec::Ones});
  specs.push_back({"final_ln.b", {d}, ParamSpec::Zeros});
  specs.push_back({"mlm.bias", {c.vocab_size}, ParamSpec::Zeros});
  return specs;
}

std::vector<ParamSpec> head_specs(const EncoderConfig& c, const std::string& task, std::size_t k) {
  return {{"head." + task + ".w", {c.d_model, k}, ParamSpec::Linear}, {"head." + task + ".b", {k}, ParamSpec::Zeros}};
}

Tensor init_param(const ParamSpec& spec, const numerics::Rng& root) {
  switch (spec.init) {
    case ParamSpec::Embedding: {
      numerics::Rng rng = root.substream(spec.name);
      return Tensor::randn(spec.shape, 0.02, rng, true);
    }
    case ParamSpec::Linear: {
      numerics::Rng rng = root.substream(spec.name);
      return Tensor::randn(spec.shape, 1.0 / std::sqrt(static_cast<double>(spec.shape[0])), rng, true);
    }
    case ParamSpec::Zeros:
      return Tensor::zeros(spec.shape, true);
    case ParamSpec::Ones:
      return Tensor::full(spec.shape, 1.0, true);
  }
  return {};
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return ops::add(ops::matmul(x, w), b); }

Tensor maybe_dropout(const Tensor& x, double p, const ForwardOptions& opt) {
  if (!opt.dropout_rng || p == 0.0) return x;
  return ops::dropout(x, p, *opt.dropout_rng);
}

json meta_json(const ModelBundle& bundle) {
  json heads = json::object();
  for (const auto& [task, labels] : bundle.heads()) heads[task] = labels;
  return json{{"format", "mtlforge-checkpoint"},
              {"version", kCheckpointVersion},
              {"config", json::parse(bundle.config().to_json())},
              {"heads", heads}};
}

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  void set_context(std::string context) { context_ = std::move(context); }

  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (pos_ + n > bytes_.size()) {
      throw CheckpointError(path_ + ": truncated while reading " + what + (context_.empty() ? "" : " of " + context_));
    }
  }
  const std::string& bytes_;
  std::string path_;
  std::string context_;
  std::size_t pos_ = 0;
};

}  // namespace

void EncoderConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_heads == 0 || n_layers == 0 || d_ff == 0) {
    throw ConfigError("encoder sizes must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (max_len < 2) throw ConfigError("max_len must be at least 2");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
}

std::string EncoderConfig::to_json() const {
  return json{{"vocab_size", vocab_size}, {"d_model", d_model}, {"n_heads", n_heads}, {"n_layers", n_layers},
              {"d_ff", d_ff},           {"max_len", max_len}, {"dropout", dropout}}
      .dump();
}

EncoderConfig EncoderConfig::from_json(const std::string& text) {
  try {
    const auto j = json::parse(text);
    EncoderConfig c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("encoder config: ") + e.what());
  }
}

ModelBundle ModelBundle::create(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  ModelBundle b;
  b.config_ = config;
  const numerics::Rng root = numerics::Rng(seed).substream("init");
  for (const auto& spec : encoder_specs(config)) b.params_[spec.name] = init_param(spec, root);
  return b;
}

std::vector<std::string> ModelBundle::task_names() const {
  std::vector<std::string> out;
  for (const auto& [task, labels] : heads_) out.push_back(task);
  return out;
}

void ModelBundle::add_head(const std::string& task, const std::vector<std::string>& labels, std::uint64_t seed) {
  if (task.empty() || task.find('.') != std::string::npos) {
    throw ConfigError("head name '" + task + "' must be non-empty and contain no '.'");
  }
  if (labels.size() < 2) throw ConfigError("head '" + task + "' needs at least two labels");
  const numerics::Rng root = numerics::Rng(seed).substream("head-init");
  for (const auto& spec : head_specs(config_, task, labels.size())) params_[spec.name] = init_param(spec, root);
  heads_[task] = labels;
}

void ModelBundle::remove_head(const std::string& task) {
  heads_.erase(task);
  params_.erase("head." + task + ".w");
  params_.erase("head." + task + ".b");
}

const Tensor& ModelBundle::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw LookupError("no parameter '" + name + "'");
  return it->second;
}

std::vector<numerics::NamedParam> ModelBundle::named_parameters() const {
  std::vector<numerics::NamedParam> out;
  for (const auto& [name, t] : params_) out.push_back({name, t});
  return out;
}

std::size_t ModelBundle::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void ModelBundle::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

ModelBundle ModelBundle::clone() const {
  ModelBundle b;
  b.config_ = config_;
  b.heads_ = heads_;
  for (const auto& [name, t] : params_) {
    auto d = t.data();
    b.params_[name] = Tensor::from_data(t.shape(), std::vector<double>(d.begin(), d.end()), true);
  }
  return b;
}

std::size_t expected_parameter_count(const EncoderConfig& c, const HeadSpec& heads) {
  const std::size_t v = c.vocab_size, d = c.d_model, f = c.d_ff, l = c.max_len;
  std::size_t n = v * d + l * d + c.n_layers * (4 * d * d + 4 * d + 4 * d + 2 * d * f + f + d) + 2 * d + v;
  for (const auto& [task, labels] : heads) n += d * labels.size() + labels.size();
  return n;
}

Batch make_batch(std::span<const tokenizer::Encoding> encodings) {
  if (encodings.empty()) throw ContractError("make_batch: no encodings");
  Batch b;
  b.batch = encodings.size();
  b.seq = encodings[0].ids.size();
  for (const auto& e : encodings) {
    if (e.ids.size() != b.seq || e.mask.size() != b.seq) throw DimensionError("make_batch: ragged encodings");
    b.ids.insert(b.ids.end(), e.ids.begin(), e.ids.end());
    b.mask.insert(b.mask.end(), e.mask.begin(), e.mask.end());
  }
  return b;
}

EncoderOutput encode(const ModelBundle& bundle, const Batch& batch, const ForwardOptions& opt) {
  const EncoderConfig& c = bundle.config();
  const std::size_t bsz = batch.batch, t = batch.seq, d = c.d_model, h = c.n_heads, dh = d / h;
  if (batch.ids.size() != bsz * t || batch.mask.size() != bsz * t) {
    throw DimensionError("encode: ids/mask sizes do not match [" + std::to_string(bsz) + "," + std::to_string(t) + "]");
  }
  if (bsz == 0 || t == 0) throw DimensionError("encode: empty batch");
  if (t > c.max_len) {
    throw DimensionError("encode: sequence length " + std::to_string(t) + " exceeds max_len " + std::to_string(c.max_len));
  }
  for (auto m : batch.mask) {
    if (m != 0 && m != 1) throw ContractError("encode: attention mask must be 0/1");
  }

  std::vector<std::int64_t> positions(bsz * t);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int64_t>(i % t);
  Tensor x = ops::add(ops::embedding(bundle.param("embed.tok"), batch.ids, {bsz, t}),
                      ops::embedding(bundle.param("embed.pos"), positions, {bsz, t}));
  x = maybe_dropout(x, c.dropout, opt);

  // Additive key mask shared by every layer: [B*H, T, T].
  std::vector<double> mask_data(bsz * h * t * t, 0.0);
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t k = 0; k < t; ++k) {
      if (batch.mask[b * t + k] != 0) continue;
      for (std::size_t hh = 0; hh < h; ++hh) {
        for (std::size_t q = 0; q < t; ++q) {
          mask_data[((b * h + hh) * t + q) * t + k] = -std::numeric_limits<double>::infinity();
        }
      }
    }
  }
  const Tensor key_mask = Tensor::from_data({bsz * h, t, t}, std::move(mask_data));
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  auto split_heads = [&](const Tensor& m) {
    return ops::reshape(ops::permute(ops::reshape(m, {bsz, t, h, dh}), {0, 2, 1, 3}), {bsz * h, t, dh});
  };

  EncoderOutput out;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    auto w = [&](const std::string& name) -> const Tensor& { return bundle.param(p + name); };

    Tensor a = ops::layer_norm(x, w("ln1.g"), w("ln1.b"));
    Tensor q = split_heads(linear(a, w("attn.wq"), w("attn.bq")));
    Tensor k = split_heads(linear(a, w("attn.wk"), w("attn.bk")));
    Tensor v = split_heads(linear(a, w("attn.wv"), w("attn.bv")));
    Tensor scores = ops::add(ops::scale(ops::matmul(q, ops::transpose(k)), inv_sqrt_dh), key_mask);
    Tensor probs = ops::softmax(scores, 2);
    if (opt.capture_attention) out.attention.push_back(ops::reshape(probs.detach(), {bsz, h, t, t}));
    Tensor ctx = ops::reshape(ops::permute(ops::reshape(ops::matmul(probs, v), {bsz, h, t, dh}), {0, 2, 1, 3}),
                              {bsz, t, d});
    x = ops::add(x, maybe_dropout(linear(ctx, w("attn.wo"), w("attn.bo")), c.dropout, opt));

    Tensor f = ops::layer_norm(x, w("ln2.g"), w("ln2.b"));
    f = linear(ops::gelu(linear(f, w("ffn.w1"), w("ffn.b1"))), w("ffn.w2"), w("ffn.b2"));
    x = ops::add(x, maybe_dropout(f, c.dropout, opt));
  }
  out.hidden = ops::layer_norm(x, bundle.param("final_ln.g"), bundle.param("final_ln.b"));
  return out;
}

Tensor mlm_logits(const ModelBundle& bundle, const Tensor& hidden) {
  return ops::add(ops::matmul(hidden, ops::transpose(bundle.param("embed.tok"))), bundle.param("mlm.bias"));
}

Tensor classify_hidden(const ModelBundle& bundle, const std::string& task, const Tensor& hidden) {
  if (!bundle.has_head(task)) {
    std::string names;
    for (const auto& n : bundle.task_names()) names += (names.empty() ? "" : ", ") + n;
    throw LookupError("no head for task '" + task + "'; registered tasks: " + (names.empty() ? "(none)" : names));
  }
  if (hidden.rank() != 3) throw DimensionError("classify: hidden states must be [batch, seq, d_model]");
  Tensor cls = ops::select(hidden, 1, 0);
  return linear(cls, bundle.param("head." + task + ".w"), bundle.param("head." + task + ".b"));
}

Tensor classify(const ModelBundle& bundle, const std::string& task, const Batch& batch, const ForwardOptions& opt) {
  if (!bundle.has_head(task)) return classify_hidden(bundle, task, Tensor::zeros({1, 1, 1}));
  return classify_hidden(bundle, task, encode(bundle, batch, opt).hidden);
}

void save_checkpoint(const ModelBundle& bundle, const std::filesystem::path& path) {
  const std::string meta = meta_json(bundle).dump();
  const auto& params = bundle.params();

  std::size_t header = sizeof kMagic + 4 + 4 + 8 + meta.size();
  for (const auto& [name, t] : params) header += 4 + name.size() + 1 + 4 + 8 * t.shape().size() + 8 + 8 + 8;

  std::string out;
  out.append(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  put<std::uint64_t>(out, meta.size());
  out += meta;
  std::uint64_t offset = header;
  for (const auto& [name, t] : params) {
    const auto d = t.data();
    const std::string_view bytes(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint8_t>(out, kDtypeF64);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape().size()));
    for (auto dim : t.shape()) put<std::uint64_t>(out, dim);
    put<std::uint64_t>(out, offset);
    put<std::uint64_t>(out, bytes.size());
    put<std::uint64_t>(out, numerics::fnv1a64(bytes));
    offset += bytes.size();
  }
  for (const auto& [name, t] : params) {
    const auto d = t.data();
    out.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double));
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write checkpoint " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("error writing checkpoint " + path.string());

  std::ofstream side(path.string() + ".config.json", std::ios::trunc);
  if (!side) throw IoError("cannot write " + path.string() + ".config.json");
  side << meta_json(bundle).dump(2) << '\n';
}

ModelBundle load_checkpoint(const std::filesystem::path& path, const std::optional<HeadSpec>& want_heads,
                            std::uint64_t head_seed) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string bytes = ss.str();
  const std::string where = path.string();
  Reader r(bytes, where);

  if (r.str(sizeof kMagic, "magic") != std::string(kMagic, sizeof kMagic)) {
    throw CheckpointError(where + ": not a checkpoint (bad magic)");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(where + ": unsupported version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const auto count = r.get<std::uint32_t>("array count");
  const auto meta_len = r.get<std::uint64_t>("metadata length");
  json meta;
  try {
    meta = json::parse(r.str(meta_len, "metadata"));
  } catch (const json::exception& e) {
    throw CheckpointError(where + ": bad metadata: " + e.what());
  }

  ModelBundle stored;
  try {
    stored = ModelBundle::create(EncoderConfig::from_json(meta.at("config").dump()), 0);
    for (const auto& [task, labels] : meta.at("heads").items()) {
      stored.add_head(task, labels.get<std::vector<std::string>>(), 0);
    }
  } catch (const json::exception& e) {
    throw CheckpointError(where + ": bad metadata: " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(where + ": bad metadata: " + e.what());
  }

  const std::string sidecar = where + ".config.json";
  if (std::filesystem::exists(sidecar)) {
    std::ifstream s(sidecar);
    json side = json::parse(s, nullptr, false);
    if (side.is_discarded() || side != meta_json(stored)) {
      throw CheckpointError(sidecar + ": does not match the checkpoint metadata");
    }
  }

  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>("array name length");
    const std::string name = r.str(name_len, "array name");
    r.set_context("array '" + name + "'");
    const auto dtype = r.get<std::uint8_t>("dtype");
    const auto rank = r.get<std::uint32_t>("rank");
    numerics::Shape shape(rank);
    for (auto& dim : shape) dim = r.get<std::uint64_t>("shape");
    const auto offset = r.get<std::uint64_t>("offset");
    const auto nbytes = r.get<std::uint64_t>("byte length");
    const auto checksum = r.get<std::uint64_t>("checksum");

    auto it = stored.params_.find(name);
    if (it == stored.params_.end()) throw CheckpointError(where + ": unexpected array '" + name + "'");
    if (dtype != kDtypeF64) throw CheckpointError(where + ": array '" + name + "' has unsupported dtype");
    if (shape != it->second.shape()) {
      throw CheckpointError(where + ": array '" + name + "' has shape " + numerics::shape_str(shape) + ", expected " +
                            numerics::shape_str(it->second.shape()));
    }
    if (nbytes != it->second.numel() * sizeof(double)) {
      throw CheckpointError(where + ": array '" + name + "' has the wrong byte length");
    }
    if (offset > bytes.size() || nbytes > bytes.size() - offset) {
      throw CheckpointError(where + ": truncated data for array '" + name + "'");
    }
    const std::string_view data(bytes.data() + offset, nbytes);
    if (numerics::fnv1a64(data) != checksum) throw CheckpointError(where + ": checksum mismatch in array '" + name + "'");
    std::memcpy(it->second.mutable_data().data(), data.data(), nbytes);
    seen.insert(name);
  }
  for (const auto& [name, t] : stored.params_) {
    if (!seen.count(name)) throw CheckpointError(where + ": missing array '" + name + "'");
  }

  if (!want_heads) return stored;
  for (const auto& task : stored.task_names()) {
    auto w = want_heads->find(task);
    if (w == want_heads->end() || w->second != stored.heads_.at(task)) stored.remove_head(task);
  }
  for (const auto& [task, labels] : *want_heads) {
    if (!stored.has_head(task)) stored.add_head(task, labels, numerics::splitmix64(head_seed ^ numerics::fnv1a64(task)));
  }
  return stored;
}

}  // namespace mtlforge::model

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mtlforge/numerics/adam.hpp"
#include "mtlforge/numerics/rng.hpp"
#include "mtlforge/numerics/tensor.hpp"
#include "mtlforge/tokenizer.hpp"

namespace mtlforge::model {

using numerics::Tensor;

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 32;
  std::size_t n_heads = 2;
  std::size_t n_layers = 2;
  std::size_t d_ff = 64;
  std::size_t max_len = 32;
  double dropout = 0.1;

  void validate() const;
  std::string to_json() const;
  static EncoderConfig from_json(const std::string& text);
  bool operator==(const EncoderConfig&) const = default;
};

/// task name -> ordered label set
using HeadSpec = std::map<std::string, std::vector<std::string>>;

/// Shared encoder, tied MLM projection and per-task affine heads. Parameters
/// live in a name-ordered map:
///   embed.tok [V,D], embed.pos [L,D]
///   layer<i>.ln1.{g,b}, layer<i>.attn.{wq,wk,wv,wo} [D,D] and {bq,bk,bv,bo} [D]
///   layer<i>.ln2.{g,b}, layer<i>.ffn.w1 [D,F], .b1 [F], .w2 [F,D], .b2 [D]
///   final_ln.{g,b}, mlm.bias [V], head.<task>.w [D,K], head.<task>.b [K]
class ModelBundle {
 public:
  static ModelBundle create(const EncoderConfig& config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }
  const HeadSpec& heads() const { return heads_; }
  std::vector<std::string> task_names() const;
  bool has_head(const std::string& task) const { return heads_.count(task) != 0; }

  /// Registers (or replaces) a head with fresh weights.
  void add_head(const std::string& task, const std::vector<std::string>& labels, std::uint64_t seed);
  void remove_head(const std::string& task);

  const Tensor& param(const std::string& name) const;
  const std::map<std::string, Tensor>& params() const { return params_; }
  std::vector<numerics::NamedParam> named_parameters() const;
  std::size_t parameter_count() const;
  void zero_grad();
  /// Deep copy with independent parameter storage.
  ModelBundle clone() const;

 private:
  friend ModelBundle load_checkpoint(const std::filesystem::path&, const std::optional<HeadSpec>&, std::uint64_t);
  EncoderConfig config_;
  HeadSpec heads_;
  std::map<std::string, Tensor> params_;
};

/// Closed form: V*D + L*D + n_layers*(4D^2 + 4D + 4D + 2DF + F + D) + 2D + V
/// + sum over heads of (D*K + K).
std::size_t expected_parameter_count(const EncoderConfig& config, const HeadSpec& heads);

/// Row-major [batch, seq] ids and 0/1 attention mask.
struct Batch {
  std::vector<std::int64_t> ids;
  std::vector<std::int64_t> mask;
  std::size_t batch = 0;
  std::size_t seq = 0;
};

Batch make_batch(std::span<const tokenizer::Encoding> encodings);

struct ForwardOptions {
  /// Non-null enables dropout (training mode) drawing from this generator.
  numerics::Rng* dropout_rng = nullptr;
  bool capture_attention = false;
};

struct EncoderOutput {
  Tensor hidden;                  // [batch, seq, d_model]
  std::vector<Tensor> attention;  // per layer [batch, heads, seq, seq] when captured
};

/// Pre-norm transformer encoder. Keys at mask == 0 get -inf scores before softmax.
EncoderOutput encode(const ModelBundle& bundle, const Batch& batch, const ForwardOptions& options = {});

/// hidden . embed.tok^T + mlm.bias -> [batch, seq, vocab]
Tensor mlm_logits(const ModelBundle& bundle, const Tensor& hidden);

/// Head applied to the [CLS] state (position 0) -> [batch, K].
Tensor classify_hidden(const ModelBundle& bundle, const std::string& task, const Tensor& hidden);
Tensor classify(const ModelBundle& bundle, const std::string& task, const Batch& batch,
                const ForwardOptions& options = {});

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary checkpoint plus a "<path>.config.json" sidecar.
void save_checkpoint(const ModelBundle& bundle, const std::filesystem::path& path);

/// Restores a bundle. With a head spec, the encoder is kept, heads whose name
/// and label set match the file are loaded, heads absent from the file are
/// freshly initialized from head_seed, and unlisted heads are dropped.
ModelBundle load_checkpoint(const std::filesystem::path& path, const std::optional<HeadSpec>& heads = std::nullopt,
                            std::uint64_t head_seed = 0);

}  // namespace mtlforge::model

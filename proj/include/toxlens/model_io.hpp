#ifndef TOXLENS_MODEL_IO_HPP_
#define TOXLENS_MODEL_IO_HPP_

#include <bit>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "toxlens/model.hpp"
#include "toxlens/textio.hpp"

namespace toxlens {

// Weight container: a JSON manifest (format_version, dtype, embedded config,
// named tensor table with byte offsets) plus one raw little-endian float32
// payload, row-major, concatenated in manifest order. Round-trips are
// bit-exact on the payload bytes.

namespace detail {

inline void append_f32_le(std::string& out, float value) {
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
  out.push_back(static_cast<char>(bits & 0xff));
  out.push_back(static_cast<char>((bits >> 8) & 0xff));
  out.push_back(static_cast<char>((bits >> 16) & 0xff));
  out.push_back(static_cast<char>((bits >> 24) & 0xff));
}

inline float read_f32_le(const std::string& bytes, std::size_t offset) {
  const auto b = [&](std::size_t i) {
    return static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + i]));
  };
  const std::uint32_t bits = b(0) | (b(1) << 8) | (b(2) << 16) | (b(3) << 24);
  return std::bit_cast<float>(bits);
}

inline void append_u64_le(std::string& out, std::uint64_t value) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

inline std::uint64_t read_u64_le(const std::string& bytes, std::size_t offset) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + static_cast<std::size_t>(i)])) << (8 * i);
  }
  return v;
}

struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::span<const float> data;
};

// Enumeration order defines the payload layout.
inline std::vector<NamedTensor> tensor_table(const ModelBundle& bundle) {
  std::vector<NamedTensor> table;
  const auto add2 = [&](const std::string& name, const Tensor2& t) {
    table.push_back({name, {t.rows(), t.cols()}, t.view()});
  };
  const auto add1 = [&](const std::string& name, const Tensor1& t) {
    table.push_back({name, {t.size()}, t.view()});
  };
  add2("embedding", bundle.embedding);
  add2("positional", bundle.positional);
  for (int l = 0; l < bundle.config.n_layers; ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    const LayerWeights& layer = bundle.layers[static_cast<std::size_t>(l)];
    add1(prefix + "ln_attn.gamma", layer.ln_attn.gamma);
    add1(prefix + "ln_attn.beta", layer.ln_attn.beta);
    add2(prefix + "attn.wq", layer.attn.wq);
    add2(prefix + "attn.wk", layer.attn.wk);
    add2(prefix + "attn.wv", layer.attn.wv);
    add2(prefix + "attn.wo", layer.attn.wo);
    add1(prefix + "ln_mlp.gamma", layer.ln_mlp.gamma);
    add1(prefix + "ln_mlp.beta", layer.ln_mlp.beta);
    add2(prefix + "mlp.w_key", layer.mlp.w_key);
    if (bundle.config.mlp_kind == MlpKind::Gated) add2(prefix + "mlp.w_gate", layer.mlp.w_gate);
    add2(prefix + "mlp.w_value", layer.mlp.w_value);
  }
  add1("final_ln.gamma", bundle.final_ln.gamma);
  add1("final_ln.beta", bundle.final_ln.beta);
  if (!bundle.config.tied_unembedding) add2("unembedding", bundle.unembedding);
  return table;
}

}  // namespace detail

inline Json config_to_json(const ModelConfig& config) {
  return Json{{"n_layers", config.n_layers},
              {"d_model", config.d_model},
              {"d_mlp", config.d_mlp},
              {"n_heads", config.n_heads},
              {"vocab_size", config.vocab_size},
              {"max_seq", config.max_seq},
              {"mlp_kind", to_string(config.mlp_kind)},
              {"activation", to_string(config.activation)},
              {"tied_unembedding", config.tied_unembedding},
              {"final_norm", config.final_norm}};
}

inline ModelConfig config_from_json(const Json& j) {
  ModelConfig config;
  try {
    config.n_layers = j.at("n_layers").get<int>();
    config.d_model = j.at("d_model").get<int>();
    config.d_mlp = j.at("d_mlp").get<int>();
    config.n_heads = j.at("n_heads").get<int>();
    config.vocab_size = j.at("vocab_size").get<int>();
    config.max_seq = j.at("max_seq").get<int>();
    config.mlp_kind = mlp_kind_from_string(j.at("mlp_kind").get<std::string>());
    config.activation = activation_from_string(j.at("activation").get<std::string>());
    config.tied_unembedding = j.at("tied_unembedding").get<bool>();
    config.final_norm = j.at("final_norm").get<bool>();
  } catch (const Json::exception& e) {
    throw Error::io("manifest_invalid", std::string("bad config block: ") + e.what());
  }
  config.validate();
  return config;
}

inline void save_bundle(const ModelBundle& bundle, const std::string& manifest_path) {
  bundle.validate();
  const std::filesystem::path mpath(manifest_path);
  std::string stem = mpath.filename().string();
  if (const auto pos = stem.rfind(".manifest"); pos != std::string::npos) stem = stem.substr(0, pos);
  const std::string payload_name = stem + ".bin";

  const auto table = detail::tensor_table(bundle);
  Json tensors = Json::array();
  std::string payload;
  std::uint64_t offset = 0;
  for (const auto& entry : table) {
    tensors.push_back(Json{{"name", entry.name}, {"shape", entry.shape}, {"offset", offset}});
    for (float v : entry.data) detail::append_f32_le(payload, v);
    offset += static_cast<std::uint64_t>(entry.data.size()) * 4;
  }

  const Json manifest{{"format_version", 1},
                      {"dtype", "f32le"},
                      {"config", config_to_json(bundle.config)},
                      {"payload", payload_name},
                      {"vocab", "vocab.tsv"},
                      {"tensors", tensors}};
  write_file(manifest_path, manifest.dump(2) + "\n");
  write_file((mpath.parent_path() / payload_name).string(), payload);
  save_vocab(bundle.vocab, (mpath.parent_path() / "vocab.tsv").string());
}

inline ModelBundle load_bundle(const std::string& manifest_path) {
  const Json manifest = load_json(manifest_path);
  if (!manifest.contains("format_version") || manifest["format_version"].get<int>() != 1) {
    throw Error::io("manifest_invalid", "unsupported format_version in " + manifest_path);
  }
  if (!manifest.contains("dtype") || manifest["dtype"].get<std::string>() != "f32le") {
    throw Error::io("manifest_invalid", "unsupported dtype in " + manifest_path);
  }
  if (!manifest.contains("config") || !manifest.contains("tensors") || !manifest.contains("payload") ||
      !manifest.contains("vocab")) {
    throw Error::io("manifest_invalid", manifest_path + " is missing required fields");
  }

  ModelBundle bundle;
  bundle.config = config_from_json(manifest["config"]);

  // Build the expected table first; the manifest must match it exactly
  // before any tensor data is read.
  ModelBundle skeleton;
  skeleton.config = bundle.config;
  skeleton.embedding = Tensor2(bundle.config.vocab_size, bundle.config.d_model);
  skeleton.positional = Tensor2(bundle.config.max_seq, bundle.config.d_model);
  skeleton.layers.resize(static_cast<std::size_t>(bundle.config.n_layers));
  for (LayerWeights& layer : skeleton.layers) {
    layer.ln_attn = {Tensor1(bundle.config.d_model), Tensor1(bundle.config.d_model)};
    layer.ln_mlp = {Tensor1(bundle.config.d_model), Tensor1(bundle.config.d_model)};
    layer.attn = {Tensor2(bundle.config.d_model, bundle.config.d_model),
                  Tensor2(bundle.config.d_model, bundle.config.d_model),
                  Tensor2(bundle.config.d_model, bundle.config.d_model),
                  Tensor2(bundle.config.d_model, bundle.config.d_model)};
    layer.mlp.w_key = Tensor2(bundle.config.d_mlp, bundle.config.d_model);
    layer.mlp.w_value = Tensor2(bundle.config.d_mlp, bundle.config.d_model);
    if (bundle.config.mlp_kind == MlpKind::Gated) {
      layer.mlp.w_gate = Tensor2(bundle.config.d_mlp, bundle.config.d_model);
    }
  }
  skeleton.final_ln = {Tensor1(bundle.config.d_model), Tensor1(bundle.config.d_model)};
  if (!bundle.config.tied_unembedding) {
    skeleton.unembedding = Tensor2(bundle.config.vocab_size, bundle.config.d_model);
  }

  const auto expected = detail::tensor_table(skeleton);
  const Json& tensors = manifest["tensors"];
  if (!tensors.is_array() || tensors.size() != expected.size()) {
    throw Error::io("manifest_invalid", "tensor table does not match config");
  }
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const Json& entry = tensors[i];
    if (entry.value("name", "") != expected[i].name) {
      throw Error::io("manifest_invalid", "unexpected tensor name at index " + std::to_string(i));
    }
    if (entry.value("shape", std::vector<int>{}) != expected[i].shape) {
      throw Error::validation("shape_mismatch", "tensor shape mismatch for " + expected[i].name);
    }
    if (entry.value("offset", std::uint64_t(-1)) != offset) {
      throw Error::io("manifest_invalid", "non-contiguous offset for " + expected[i].name);
    }
    offset += static_cast<std::uint64_t>(expected[i].data.size()) * 4;
  }

  const auto dir = std::filesystem::path(manifest_path).parent_path();
  const std::string payload = read_file((dir / manifest["payload"].get<std::string>()).string());
  if (payload.size() != offset) {
    throw Error::io("truncated_payload", "payload has " + std::to_string(payload.size()) +
                                             " bytes, expected " + std::to_string(offset));
  }

  std::size_t cursor = 0;
  const auto read1 = [&](int n) {
    std::vector<float> data(static_cast<std::size_t>(n));
    for (float& v : data) {
      v = detail::read_f32_le(payload, cursor);
      cursor += 4;
    }
    return Tensor1(std::move(data));
  };
  const auto read2 = [&](int rows, int cols) {
    std::vector<float> data(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols));
    for (float& v : data) {
      v = detail::read_f32_le(payload, cursor);
      cursor += 4;
    }
    return Tensor2(rows, cols, std::move(data));
  };

  bundle.embedding = read2(bundle.config.vocab_size, bundle.config.d_model);
  bundle.positional = read2(bundle.config.max_seq, bundle.config.d_model);
  bundle.layers.resize(static_cast<std::size_t>(bundle.config.n_layers));
  for (LayerWeights& layer : bundle.layers) {
    layer.ln_attn.gamma = read1(bundle.config.d_model);
    layer.ln_attn.beta = read1(bundle.config.d_model);
    layer.attn.wq = read2(bundle.config.d_model, bundle.config.d_model);
    layer.attn.wk = read2(bundle.config.d_model, bundle.config.d_model);
    layer.attn.wv = read2(bundle.config.d_model, bundle.config.d_model);
    layer.attn.wo = read2(bundle.config.d_model, bundle.config.d_model);
    layer.ln_mlp.gamma = read1(bundle.config.d_model);
    layer.ln_mlp.beta = read1(bundle.config.d_model);
    layer.mlp.w_key = read2(bundle.config.d_mlp, bundle.config.d_model);
    if (bundle.config.mlp_kind == MlpKind::Gated) {
      layer.mlp.w_gate = read2(bundle.config.d_mlp, bundle.config.d_model);
    }
    layer.mlp.w_value = read2(bundle.config.d_mlp, bundle.config.d_model);
  }
  bundle.final_ln.gamma = read1(bundle.config.d_model);
  bundle.final_ln.beta = read1(bundle.config.d_model);
  if (!bundle.config.tied_unembedding) {
    bundle.unembedding = read2(bundle.config.vocab_size, bundle.config.d_model);
  }

  bundle.vocab = load_vocab((dir / manifest["vocab"].get<std::string>()).string());
  bundle.validate();
  return bundle;
}

// ---------------------------------------------------------------------------
// mean activation profile, binary f64 container

inline void save_profile(const MeanActivationProfile& profile, const std::string& path) {
  std::string out = "TXPF";
  detail::append_u64_le(out, 1);  // version
  detail::append_u64_le(out, static_cast<std::uint64_t>(profile.n_layers));
  detail::append_u64_le(out, static_cast<std::uint64_t>(profile.d_mlp));
  detail::append_u64_le(out, profile.sample_count);
  detail::append_u64_le(out, static_cast<std::uint64_t>(profile.n_new));
  detail::append_u64_le(out, profile.generated_only ? 1 : 0);
  for (double v : profile.mean) detail::append_u64_le(out, std::bit_cast<std::uint64_t>(v));
  write_file(path, out);
}

inline MeanActivationProfile load_profile(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 4 + 6 * 8 || bytes.substr(0, 4) != "TXPF") {
    throw Error::io("bad_profile", path + " is not a profile file");
  }
  std::size_t cursor = 4;
  const auto next_u64 = [&]() {
    const std::uint64_t v = detail::read_u64_le(bytes, cursor);
    cursor += 8;
    return v;
  };
  if (next_u64() != 1) throw Error::io("bad_profile", "unsupported profile version");
  MeanActivationProfile profile;
  profile.n_layers = static_cast<int>(next_u64());
  profile.d_mlp = static_cast<int>(next_u64());
  profile.sample_count = next_u64();
  profile.n_new = static_cast<int>(next_u64());
  profile.generated_only = next_u64() != 0;
  const std::size_t count = static_cast<std::size_t>(profile.n_layers) * static_cast<std::size_t>(profile.d_mlp);
  if (bytes.size() != cursor + count * 8) {
    throw Error::io("truncated_payload", "profile payload size mismatch in " + path);
  }
  profile.mean.resize(count);
  for (double& v : profile.mean) v = std::bit_cast<double>(next_u64());
  return profile;
}

}  // namespace toxlens

#endif  // TOXLENS_MODEL_IO_HPP_

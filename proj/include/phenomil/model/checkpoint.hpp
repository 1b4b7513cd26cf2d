#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "phenomil/core/error.hpp"
#include "phenomil/core/param.hpp"
#include "phenomil/data/bag.hpp"
#include "phenomil/model/gpnn.hpp"
#include "phenomil/model/pamil.hpp"

namespace phenomil::checkpoint {

// Container layout (little-endian):
//   magic[4], u32 version, u32 record count,
//   records: u16 name length, name, u32 rows, u32 cols, rows*cols f64,
//   u32 config length, config JSON text.
// Every trainable tensor is followed by `<name>.adam_m` and `<name>.adam_v`.

inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::array<char, 4> kPamilMagic{'P', 'A', 'M', 'C'};
inline constexpr std::array<char, 4> kGpnnMagic{'G', 'P', 'N', 'C'};

struct Container {
  std::vector<std::pair<std::string, Matrix>> records;
  nlohmann::ordered_json config;
};

inline std::vector<std::uint8_t> encode(const std::array<char, 4>& magic, const Container& c) {
  io::ByteWriter w;
  w.bytes(magic.data(), 4);
  w.le(kVersion);
  w.le(static_cast<std::uint32_t>(c.records.size()));
  for (const auto& [name, m] : c.records) {
    w.str16(name);
    w.le(static_cast<std::uint32_t>(m.rows()));
    w.le(static_cast<std::uint32_t>(m.cols()));
    for (double v : m.values()) w.f64(v);
  }
  const std::string text = c.config.dump();
  w.le(static_cast<std::uint32_t>(text.size()));
  w.bytes(text.data(), text.size());
  return w.buffer();
}

inline Container decode(const std::array<char, 4>& magic, std::vector<std::uint8_t> bytes) {
  io::ByteReader r(std::move(bytes));
  const auto m = r.magic();
  if (m != magic) {
    throw FormatError("checkpoint magic mismatch: expected '" + std::string(magic.data(), 4) + "', found '" +
                          std::string(m.data(), 4) + "'",
                      0);
  }
  const auto off = r.offset();
  const auto version = r.le<std::uint32_t>("version");
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version), off);
  const auto count = r.le<std::uint32_t>("record count");
  Container c;
  for (std::uint32_t k = 0; k < count; ++k) {
    auto name = r.str16("record name");
    const auto rows = r.le<std::uint32_t>("rows");
    const auto cols = r.le<std::uint32_t>("cols");
    const std::uint64_t n = static_cast<std::uint64_t>(rows) * cols;
    if (n > r.remaining() / 8) throw FormatError("tensor '" + name + "' overflows the payload", r.offset());
    Matrix mat(rows, cols);
    for (auto& v : mat.values()) v = r.f64("tensor payload");
    c.records.emplace_back(std::move(name), std::move(mat));
  }
  const auto len = r.le<std::uint32_t>("config length");
  r.need(len, "config block");
  std::string text(len, '\0');
  for (auto& ch : text) ch = static_cast<char>(r.le<std::uint8_t>("config block"));
  if (r.remaining() != 0) throw FormatError("trailing bytes after config block", r.offset());
  try {
    c.config = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config block: ") + e.what(), off);
  }
  return c;
}

inline void add_tensor(Container& c, const ParamTensor& p, bool with_moments) {
  c.records.emplace_back(p.name, p.value);
  if (with_moments) {
    c.records.emplace_back(p.name + ".adam_m", p.adam_m);
    c.records.emplace_back(p.name + ".adam_v", p.adam_v);
  }
  c.config["steps"][p.name] = p.step_count;
}

inline void restore_tensor(const std::map<std::string, const Matrix*>& index, const nlohmann::ordered_json& cfg,
                           ParamTensor& p, bool with_moments) {
  auto fetch = [&](const std::string& key, Matrix& into) {
    const auto it = index.find(key);
    if (it == index.end()) throw FormatError("checkpoint is missing tensor '" + key + "'", 0);
    if (!it->second->same_shape(into)) {
      throw ShapeError("checkpoint tensor '" + key + "' has shape " + shape_string(*it->second) + ", expected " +
                       shape_string(into));
    }
    into = *it->second;
  };
  fetch(p.name, p.value);
  if (with_moments) {
    fetch(p.name + ".adam_m", p.adam_m);
    fetch(p.name + ".adam_v", p.adam_v);
  }
  p.grad = Matrix(p.value.rows(), p.value.cols());
  p.step_count = cfg.at("steps").value(p.name, std::uint64_t{0});
}

inline std::map<std::string, const Matrix*> index_records(const Container& c) {
  std::map<std::string, const Matrix*> out;
  for (const auto& [name, m] : c.records) out[name] = &m;
  return out;
}

// ---------------------------------------------------------------------------
// PA-MIL

inline std::vector<std::uint8_t> encode_pamil(pamil::Params& p) {
  Container c;
  const auto& cfg = p.config;
  c.config["kind"] = "pamil";
  c.config["tau"] = cfg.tau;
  c.config["alpha"] = cfg.alpha;
  c.config["activation"] = to_string(cfg.activation.kind);
  c.config["ln_eps"] = cfg.activation.ln_eps;
  c.config["leaky_slope"] = cfg.activation.leaky_slope;
  c.config["head"] = pamil::to_string(cfg.head);
  c.config["feature_hidden"] = cfg.feature_hidden;
  c.config["init_std"] = cfg.init_std;
  c.config["bottleneck_init_std"] = cfg.bottleneck_init_std;
  c.config["d"] = p.dimension();
  c.config["n_phenotypes"] = p.num_phenotypes();
  c.config["n_classes"] = p.num_classes();
  c.config["has_feature_head"] = p.feature_head.has_value();
  c.config["steps"] = nlohmann::ordered_json::object();
  for (auto* t : p.all_tensors()) add_tensor(c, *t, t != &p.centers);
  return encode(kPamilMagic, c);
}

inline pamil::Params decode_pamil(std::vector<std::uint8_t> bytes) {
  const auto c = decode(kPamilMagic, std::move(bytes));
  const auto& j = c.config;
  pamil::Params p;
  try {
    pamil::Config cfg;
    cfg.tau = j.at("tau").get<double>();
    cfg.alpha = j.at("alpha").get<double>();
    cfg.activation.kind = parse_activation(j.at("activation").get<std::string>());
    cfg.activation.ln_eps = j.at("ln_eps").get<double>();
    cfg.activation.leaky_slope = j.at("leaky_slope").get<double>();
    cfg.head = pamil::parse_head(j.at("head").get<std::string>());
    cfg.feature_hidden = j.at("feature_hidden").get<std::size_t>();
    cfg.init_std = j.at("init_std").get<double>();
    cfg.bottleneck_init_std = j.at("bottleneck_init_std").get<double>();
    const auto d = j.at("d").get<std::size_t>();
    const auto n = j.at("n_phenotypes").get<std::size_t>();
    const auto nc = j.at("n_classes").get<std::size_t>();
    const bool has_fh = j.at("has_feature_head").get<bool>();
    p.config = cfg;
    p.wq = ParamTensor("wq", Matrix(d, d));
    p.wk = ParamTensor("wk", Matrix(d, d));
    p.wv = ParamTensor("wv", Matrix(d, d));
    p.w_bottleneck = ParamTensor("w_bottleneck", Matrix(1, d));
    p.cls_w = ParamTensor("cls_w", Matrix(nc, n));
    p.cls_b = ParamTensor("cls_b", Matrix(1, nc));
    if (has_fh) {
      const auto h = cfg.feature_hidden;
      p.feature_head = pamil::FeatureHead{ParamTensor("feat_w1", Matrix(d, h)), ParamTensor("feat_b1", Matrix(1, h)),
                                          ParamTensor("feat_w2", Matrix(h, nc)), ParamTensor("feat_b2", Matrix(1, nc))};
    }
    p.centers = ParamTensor("centers", Matrix(n, d));
    const auto index = index_records(c);
    for (auto* t : p.all_tensors()) restore_tensor(index, j, *t, t != &p.centers);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("pamil checkpoint config: ") + e.what(), 0);
  }
  return p;
}

inline void save_pamil(pamil::Params& p, const std::string& path) {
  io::write_file_bytes(encode_pamil(p), path);
}

inline pamil::Params load_pamil(const std::string& path) {
  return decode_pamil(io::read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// GP-NN

inline std::vector<std::uint8_t> encode_gpnn(gpnn::Params& p) {
  Container c;
  const auto& cfg = p.config;
  c.config["kind"] = "gpnn";
  c.config["d"] = cfg.d;
  c.config["max_hidden"] = cfg.max_hidden;
  c.config["activation"] = to_string(cfg.activation.kind);
  c.config["ln_eps"] = cfg.activation.ln_eps;
  c.config["leaky_slope"] = cfg.activation.leaky_slope;
  c.config["log_input"] = cfg.log_input;
  c.config["init"] = gpnn::to_string(cfg.init);
  c.config["n_classes"] = p.num_classes();
  std::vector<std::size_t> widths;
  for (const auto& e : p.encoders) widths.push_back(e.input_width());
  c.config["gene_set_sizes"] = widths;
  c.config["steps"] = nlohmann::ordered_json::object();
  for (auto* t : p.all_tensors()) add_tensor(c, *t, true);
  return encode(kGpnnMagic, c);
}

inline gpnn::Params decode_gpnn(std::vector<std::uint8_t> bytes) {
  const auto c = decode(kGpnnMagic, std::move(bytes));
  const auto& j = c.config;
  gpnn::Params p;
  try {
    gpnn::Config cfg;
    cfg.d = j.at("d").get<std::size_t>();
    cfg.max_hidden = j.at("max_hidden").get<std::size_t>();
    cfg.activation.kind = parse_activation(j.at("activation").get<std::string>());
    cfg.activation.ln_eps = j.at("ln_eps").get<double>();
    cfg.activation.leaky_slope = j.at("leaky_slope").get<double>();
    cfg.log_input = j.at("log_input").get<bool>();
    cfg.init = gpnn::parse_init(j.at("init").get<std::string>());
    const auto nc = j.at("n_classes").get<std::size_t>();
    const auto widths = j.at("gene_set_sizes").get<std::vector<std::size_t>>();
    p.config = cfg;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const auto h = gpnn::hidden_width(widths[i], cfg);
      p.encoders.push_back(gpnn::Encoder{ParamTensor(fmt::format("enc.{}.w1", i), Matrix(widths[i], h)),
                                         ParamTensor(fmt::format("enc.{}.b1", i), Matrix(1, h)),
                                         ParamTensor(fmt::format("enc.{}.w2", i), Matrix(h, cfg.d)),
                                         ParamTensor(fmt::format("enc.{}.b2", i), Matrix(1, cfg.d))});
    }
    p.w_g = ParamTensor("w_g", Matrix(1, cfg.d));
    p.cls_w = ParamTensor("cls.w", Matrix(nc, widths.size()));
    p.cls_b = ParamTensor("cls.b", Matrix(1, nc));
    const auto index = index_records(c);
    for (auto* t : p.all_tensors()) restore_tensor(index, j, *t, true);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("gpnn checkpoint config: ") + e.what(), 0);
  }
  return p;
}

inline void save_gpnn(gpnn::Params& p, const std::string& path) {
  io::write_file_bytes(encode_gpnn(p), path);
}

inline gpnn::Params load_gpnn(const std::string& path) { return decode_gpnn(io::read_file_bytes(path)); }

}  // namespace phenomil::checkpoint

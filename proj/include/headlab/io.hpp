#pragma once

// Persistence: binary checkpoints, PGM export, CSV tables, selection
// documents and JSON run configs. Every writer is byte-deterministic.

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "headlab/attention.hpp"
#include "headlab/dit.hpp"
#include "headlab/error.hpp"
#include "headlab/headhunter.hpp"
#include "headlab/objectives.hpp"
#include "headlab/sampler.hpp"
#include "headlab/sweep.hpp"
#include "headlab/synth.hpp"
#include "headlab/tensor.hpp"
#include "headlab/train.hpp"

namespace headlab {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Base for every "the file exists but its contents are wrong" failure.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MagicMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ShapeMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// A run config lacks a required key or holds a value of the wrong type.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what) : std::runtime_error(what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

using Bytes = std::vector<unsigned char>;

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline void write_file(const std::filesystem::path& path, const Bytes& bytes) {
  write_file(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  std::array<char, 32> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc()) throw std::logic_error("to_chars failed");
  return std::string(buf.data(), end);
}

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::string_view kCheckpointMagic = "DITCKPT1";
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::ordered_json config_to_json(const DitConfig& c) {
  nlohmann::ordered_json j;
  j["image_size"] = c.image_size;
  j["channels"] = c.channels;
  j["patch"] = c.patch;
  j["layers"] = c.layers;
  j["heads_per_layer"] = c.heads_per_layer;
  j["model_dim"] = c.model_dim;
  j["head_dim"] = c.head_dim;
  j["mlp_ratio"] = c.mlp_ratio;
  j["class_count"] = c.class_count;
  return j;
}

namespace detail {

template <class Json, class T>
T required(const Json& obj, const std::string& key, const std::string& where) {
  const std::string full = where.empty() ? key : where + "." + key;
  if (!obj.is_object() || !obj.contains(key)) throw ConfigError(full, "missing config key '" + full + "'");
  try {
    return obj.at(key).template get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(full, "config key '" + full + "' has the wrong type");
  }
}

template <class Json>
std::size_t required_size(const Json& obj, const std::string& key, const std::string& where) {
  const std::string full = where.empty() ? key : where + "." + key;
  if (!obj.is_object() || !obj.contains(key)) throw ConfigError(full, "missing config key '" + full + "'");
  const auto& v = obj.at(key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.template get<long long>() >= 0))
    throw ConfigError(full, "config key '" + full + "' must be a non-negative integer");
  return v.template get<std::size_t>();
}

inline void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f64_le(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

inline double get_f64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

}  // namespace detail

template <class Json>
DitConfig config_from_json(const Json& j, const std::string& where = "") {
  DitConfig c;
  c.image_size = detail::required_size(j, "image_size", where);
  c.channels = detail::required_size(j, "channels", where);
  c.patch = detail::required_size(j, "patch", where);
  c.layers = detail::required_size(j, "layers", where);
  c.heads_per_layer = detail::required_size(j, "heads_per_layer", where);
  c.model_dim = detail::required_size(j, "model_dim", where);
  c.head_dim = detail::required_size(j, "head_dim", where);
  c.mlp_ratio = detail::required_size(j, "mlp_ratio", where);
  c.class_count = detail::required_size(j, "class_count", where);
  return c;
}

inline std::string checkpoint_bytes(const DitWeights& w) {
  nlohmann::ordered_json header;
  header["format_version"] = kCheckpointVersion;
  header["config"] = config_to_json(w.config);
  auto params = nlohmann::ordered_json::array();
  w.visit([&](const std::string& name, const Tensor& t) {
    params.push_back({{"name", name}, {"shape", t.shape()}});
  });
  header["params"] = std::move(params);
  const std::string text = header.dump();

  std::string out(kCheckpointMagic);
  detail::put_u32_le(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out.reserve(out.size() + 8 * w.parameter_count());
  w.visit([&](const std::string&, const Tensor& t) {
    for (double v : t.data()) detail::put_f64_le(out, v);
  });
  return out;
}

inline void save_checkpoint(const DitWeights& w, const std::filesystem::path& path) {
  write_file(path, checkpoint_bytes(w));
}

inline DitWeights parse_checkpoint(const Bytes& bytes) {
  const std::size_t magic = kCheckpointMagic.size();
  if (bytes.size() < magic ||
      !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin()))
    throw MagicMismatchError("not a checkpoint: magic bytes differ from DITCKPT1");
  if (bytes.size() < magic + 4) throw TruncatedError("checkpoint ends inside the header length");
  const std::size_t header_len = detail::get_u32_le(bytes.data() + magic);
  const std::size_t payload_at = magic + 4 + header_len;
  if (bytes.size() < payload_at) throw TruncatedError("checkpoint ends inside the JSON header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(magic + 4),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(payload_at));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  DitWeights w;
  std::vector<std::pair<std::string, Shape>> declared;
  try {
    if (header.value("format_version", 0) != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
    const DitConfig cfg = config_from_json(header.at("config"), "config");
    cfg.validate();
    w = DitWeights::zeros(cfg);
    for (const auto& p : header.at("params"))
      declared.emplace_back(p.at("name").get<std::string>(), p.at("shape").get<Shape>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is malformed: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint header is malformed: ") + e.what());
  } catch (const DomainError& e) {
    throw FormatError(std::string("checkpoint config is invalid: ") + e.what());
  }

  std::size_t declared_elems = 0;
  for (const auto& [name, shape] : declared) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    declared_elems += n;
  }
  const std::size_t payload = bytes.size() - payload_at;
  if (payload != 8 * declared_elems)
    throw TruncatedError("checkpoint payload holds " + std::to_string(payload) + " bytes, header declares " +
                         std::to_string(8 * declared_elems));

  std::size_t index = 0;
  const unsigned char* p = bytes.data() + payload_at;
  w.visit([&](const std::string& name, Tensor& t) {
    if (index >= declared.size()) throw ShapeMismatchError("checkpoint lacks parameter " + name);
    const auto& [dname, dshape] = declared[index++];
    if (dname != name) throw ShapeMismatchError("checkpoint parameter " + dname + " found where " + name + " expected");
    if (dshape != t.shape())
      throw ShapeMismatchError("parameter " + name + " is " + shape_string(dshape) + ", config implies " +
                               shape_string(t.shape()));
    for (double& v : t.storage()) {
      v = detail::get_f64_le(p);
      p += 8;
    }
  });
  if (index != declared.size()) throw ShapeMismatchError("checkpoint declares more parameters than the config implies");
  return w;
}

inline DitWeights load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

// ---------------------------------------------------------------------------
// Images

/// Byte for a value on the [-3, 3] display range, rounding half up.
inline unsigned char pgm_level(double v) {
  const double s = std::clamp((v + 3.0) / 6.0, 0.0, 1.0);
  return static_cast<unsigned char>(std::floor(s * 255.0 + 0.5));
}

inline std::string pgm_bytes(const Tensor& img) {
  if (img.rank() != 2) throw DimensionError("PGM export needs a 2-D tensor, got " + shape_string(img.shape()));
  if (!img.all_finite()) throw NumericError("PGM export needs a finite image");
  std::string out = "P5\n" + std::to_string(img.cols()) + " " + std::to_string(img.rows()) + "\n255\n";
  for (double v : img.data()) out.push_back(static_cast<char>(pgm_level(v)));
  return out;
}

inline void write_pgm(const Tensor& img, const std::filesystem::path& path) { write_file(path, pgm_bytes(img)); }

/// Lays equally sized images out left to right, `per_row` per row, separated by `pad` pixels of `fill`.
inline Tensor tile_images(const std::vector<Tensor>& images, std::size_t per_row, std::size_t pad = 1,
                          double fill = -3.0) {
  if (images.empty()) throw DomainError("tile_images needs at least one image");
  if (per_row == 0) throw DomainError("per_row must be positive");
  const std::size_t h = images[0].rows(), w = images[0].cols();
  for (const Tensor& im : images)
    if (im.rank() != 2 || im.rows() != h || im.cols() != w) throw DimensionError("tile_images needs equal image shapes");
  const std::size_t cols = std::min(per_row, images.size());
  const std::size_t rows = (images.size() + per_row - 1) / per_row;
  Tensor grid = Tensor::matrix(rows * h + (rows - 1) * pad, cols * w + (cols - 1) * pad, fill);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::size_t r0 = (i / per_row) * (h + pad), c0 = (i % per_row) * (w + pad);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) grid(r0 + r, c0 + c) = images[i](r, c);
  }
  return grid;
}

/// PGM per example plus manifest.csv (index,class,seed); seeds follow make_dataset.
inline void dump_dataset(const std::filesystem::path& dir, std::size_t count, std::uint64_t base_seed,
                         const SynthOptions& opts = {}) {
  std::filesystem::create_directories(dir);
  const Dataset data = make_dataset(count, base_seed, opts);
  std::string manifest = "index,class,seed\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%05zu.pgm", i);
    write_pgm(data[i].x0, dir / name);
    manifest += std::to_string(i) + "," + std::to_string(data[i].label) + "," + std::to_string(base_seed + i) + "\n";
  }
  write_file(dir / "manifest.csv", manifest);
}

// ---------------------------------------------------------------------------
// CSV tables (LF line endings, shortest round-trip numbers)

inline std::string loss_csv(const std::vector<LossPoint>& curve) {
  std::string out = "step,loss\n";
  for (const LossPoint& p : curve) out += std::to_string(p.step) + "," + format_double(p.loss) + "\n";
  return out;
}

inline std::string trajectory_csv(const std::vector<TrajectoryPoint>& traj) {
  std::string out = "step,t,mean,std,l2_to_unguided\n";
  for (const TrajectoryPoint& p : traj)
    out += std::to_string(p.step) + "," + format_double(p.t) + "," + format_double(p.mean) + "," +
           format_double(p.stddev) + "," + format_double(p.l2_to_unguided) + "\n";
  return out;
}

/// Rows of one round (no header); rank is 1-based.
inline std::string ledger_rows(const RoundLedger& round) {
  std::string out;
  for (std::size_t i = 0; i < round.ranking.size(); ++i) {
    const LedgerEntry& e = round.ranking[i];
    out += std::to_string(round.round) + "," + std::to_string(e.head.layer) + "," + std::to_string(e.head.head) + "," +
           format_double(e.score) + "," + std::to_string(i + 1) + "\n";
  }
  return out;
}

inline std::string ledger_csv(const std::vector<RoundLedger>& ledger) {
  std::string out = "round,layer,head,score,rank\n";
  for (const RoundLedger& r : ledger) out += ledger_rows(r);
  return out;
}

/// One row per (w, u, pair).
inline std::string sweep_csv(const SweepResult& r) {
  std::string out = "w,u,pair,cond,seed,score\n";
  for (const SweepCell& c : r.cells)
    out += format_double(c.w) + "," + format_double(c.u) + "," + std::to_string(c.pair) + "," +
           (c.cond ? std::to_string(*c.cond) : std::string("null")) + "," + std::to_string(c.seed) + "," +
           format_double(c.score) + "\n";
  return out;
}

/// Mean score per cell: one row per w, one column per u.
inline std::string sweep_matrix_csv(const SweepResult& r) {
  std::string out = "w";
  for (double u : r.u_grid) out += ",u=" + format_double(u);
  out += "\n";
  for (std::size_t i = 0; i < r.w_grid.size(); ++i) {
    out += format_double(r.w_grid[i]);
    for (double v : r.matrix[i]) out += "," + format_double(v);
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Selection documents

inline constexpr int kSelectionVersion = 1;

inline std::string to_string(PertAnchor a) { return a == PertAnchor::cfg ? "cfg" : "cond"; }

inline std::optional<PertAnchor> parse_pert_anchor(std::string_view s) {
  if (s == "cond") return PertAnchor::cond;
  if (s == "cfg") return PertAnchor::cfg;
  return std::nullopt;
}

struct SelectionDoc {
  struct Round {
    std::size_t round = 0;
    std::size_t candidates = 0;
    std::vector<HeadId> winners;
    std::string best_score;
    std::size_t failed = 0;
  };

  std::vector<HeadId> heads;
  PerturbMethod method = PerturbMethod::pag;
  double u = 1.0;
  double tau = 1.0;
  std::string objective;
  std::size_t k = 0;
  std::size_t rounds = 0;
  std::vector<Round> ledger;

  PerturbSpec spec() const { return PerturbSpec::of(heads, method, u, tau); }
};

inline nlohmann::ordered_json selection_json(const SearchState& state, const SearchConfig& cfg) {
  if (state.ledger.empty()) throw DomainError("selection document needs at least one completed round");
  nlohmann::ordered_json j;
  j["artifact"] = "headlab.selection";
  j["version"] = kSelectionVersion;

  nlohmann::ordered_json c;
  c["k"] = cfg.k;
  c["rounds"] = cfg.rounds;
  c["method"] = to_string(cfg.method);
  c["u"] = cfg.u;
  c["tau"] = cfg.tau;
  c["objective"] = to_string(cfg.objective);
  c["w_cfg"] = cfg.guidance.w_cfg;
  c["w_pert"] = cfg.guidance.w_pert;
  c["steps"] = cfg.guidance.steps;
  c["pert_anchor"] = to_string(cfg.guidance.anchor);
  auto pairs = nlohmann::ordered_json::array();
  for (const PromptSeedPair& p : cfg.pairs) {
    nlohmann::ordered_json pj;
    pj["cond"] = p.cond ? nlohmann::ordered_json(*p.cond) : nlohmann::ordered_json(nullptr);
    pj["seed"] = p.seed;
    pairs.push_back(std::move(pj));
  }
  c["pairs"] = std::move(pairs);
  j["config"] = std::move(c);

  auto heads = nlohmann::ordered_json::array();
  for (HeadId h : state.selected) heads.push_back({h.layer, h.head});
  j["selected"] = std::move(heads);

  auto rounds = nlohmann::ordered_json::array();
  for (const RoundLedger& r : state.ledger) {
    nlohmann::ordered_json rj;
    rj["round"] = r.round;
    rj["candidates"] = r.ranking.size();
    auto winners = nlohmann::ordered_json::array();
    for (HeadId h : r.winners) winners.push_back({h.layer, h.head});
    rj["winners"] = std::move(winners);
    rj["best_score"] = r.ranking.empty() ? std::string("nan") : format_double(r.ranking.front().score);
    char digest[17];
    std::snprintf(digest, sizeof digest, "%016llx", static_cast<unsigned long long>(fnv1a(ledger_rows(r))));
    rj["ledger_fnv1a"] = digest;
    rj["failed"] = r.failed.size();
    rounds.push_back(std::move(rj));
  }
  j["rounds"] = std::move(rounds);
  return j;
}

inline void save_selection(const SearchState& state, const SearchConfig& cfg, const std::filesystem::path& path) {
  write_file(path, selection_json(state, cfg).dump(2) + "\n");
}

inline SelectionDoc parse_selection(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("artifact").get<std::string>() != "headlab.selection") throw FormatError("not a selection document");
    if (j.at("version").get<int>() != kSelectionVersion) throw FormatError("unsupported selection document version");
    SelectionDoc doc;
    const auto& c = j.at("config");
    const auto method = parse_perturb_method(c.at("method").get<std::string>());
    if (!method) throw FormatError("selection document names an unknown method");
    doc.method = *method;
    doc.u = c.at("u").get<double>();
    doc.tau = c.at("tau").get<double>();
    doc.objective = c.at("objective").get<std::string>();
    doc.k = c.at("k").get<std::size_t>();
    doc.rounds = c.at("rounds").get<std::size_t>();
    auto head_list = [](const nlohmann::json& arr) {
      std::vector<HeadId> out;
      for (const auto& h : arr) {
        if (!h.is_array() || h.size() != 2) throw FormatError("heads must be [layer, head] pairs");
        out.push_back({h.at(0).get<std::size_t>(), h.at(1).get<std::size_t>()});
      }
      return out;
    };
    doc.heads = head_list(j.at("selected"));
    for (const auto& r : j.at("rounds")) {
      SelectionDoc::Round round;
      round.round = r.at("round").get<std::size_t>();
      round.candidates = r.at("candidates").get<std::size_t>();
      round.winners = head_list(r.at("winners"));
      round.best_score = r.at("best_score").get<std::string>();
      round.failed = r.at("failed").get<std::size_t>();
      doc.ledger.push_back(std::move(round));
    }
    doc.spec().validate();
    return doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed selection document: ") + e.what());
  } catch (const DomainError& e) {
    throw FormatError(std::string("malformed selection document: ") + e.what());
  }
}

inline SelectionDoc load_selection(const std::filesystem::path& path) {
  const Bytes b = read_file(path);
  return parse_selection(std::string_view(reinterpret_cast<const char*>(b.data()), b.size()));
}

/// Count of heads per layer; heads outside the model raise DomainError.
inline std::vector<std::size_t> layer_histogram(const std::vector<HeadId>& heads, const DitConfig& cfg) {
  std::vector<std::size_t> hist(cfg.layers, 0);
  for (HeadId h : heads) {
    if (h.layer >= cfg.layers || h.head >= cfg.heads_per_layer)
      throw DomainError("head " + to_string(h) + " is outside the model");
    ++hist[h.layer];
  }
  return hist;
}

/// |A and B| / |A or B| as a percentage; 0 when both are empty.
inline double overlap_percent(const std::vector<HeadId>& a, const std::vector<HeadId>& b) {
  std::vector<HeadId> sa = a, sb = b, both, either;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  sa.erase(std::unique(sa.begin(), sa.end()), sa.end());
  sb.erase(std::unique(sb.begin(), sb.end()), sb.end());
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(both));
  std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(either));
  return either.empty() ? 0.0 : 100.0 * static_cast<double>(both.size()) / static_cast<double>(either.size());
}

// ---------------------------------------------------------------------------
// Command-line forms

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  for (;;) {
    const auto pos = s.find(sep);
    out.push_back(trim(s.substr(0, pos)));
    if (pos == std::string_view::npos) return out;
    s.remove_prefix(pos + 1);
  }
}

inline std::optional<std::size_t> parse_index(std::string_view s) {
  std::size_t v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || end != s.data() + s.size()) return std::nullopt;
  return v;
}

}  // namespace detail

/// "all", "L3:*" / "3:*" (whole layer), or "l:h" items, comma separated. Empty text is the empty set.
inline std::vector<HeadId> parse_head_list(std::string_view text, const DitConfig& cfg) {
  std::vector<HeadId> heads;
  text = detail::trim(text);
  if (text.empty()) return heads;
  auto add = [&](HeadId id) {
    if (id.layer >= cfg.layers || id.head >= cfg.heads_per_layer)
      throw DomainError("head " + to_string(id) + " is outside the " + std::to_string(cfg.layers) + "x" +
                        std::to_string(cfg.heads_per_layer) + " model");
    if (std::find(heads.begin(), heads.end(), id) == heads.end()) heads.push_back(id);
  };
  for (std::string_view item : detail::split(text, ',')) {
    if (item == "all") {
      for (HeadId id : all_heads(cfg)) add(id);
      continue;
    }
    const auto colon = item.find(':');
    if (colon == std::string_view::npos) throw DomainError("malformed head '" + std::string(item) + "', expected l:h");
    std::string_view layer = item.substr(0, colon), head = item.substr(colon + 1);
    if (!layer.empty() && (layer.front() == 'L' || layer.front() == 'l')) layer.remove_prefix(1);
    const auto l = detail::parse_index(layer);
    if (!l) throw DomainError("malformed head '" + std::string(item) + "', expected l:h");
    if (head == "*") {
      if (*l >= cfg.layers) throw DomainError("layer " + std::to_string(*l) + " is outside the model");
      for (std::size_t h = 0; h < cfg.heads_per_layer; ++h) add({*l, h});
      continue;
    }
    const auto h = detail::parse_index(head);
    if (!h) throw DomainError("malformed head '" + std::string(item) + "', expected l:h");
    add({*l, *h});
  }
  return heads;
}

/// Comma-separated finite numbers, e.g. "0,0.25,1".
inline std::vector<double> parse_grid(std::string_view text) {
  std::vector<double> out;
  if (detail::trim(text).empty()) throw DomainError("grid is empty");
  for (std::string_view item : detail::split(text, ',')) {
    double v = 0.0;
    auto [end, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (item.empty() || ec != std::errc() || end != item.data() + item.size() || !std::isfinite(v))
      throw DomainError("malformed grid value '" + std::string(item) + "'");
    out.push_back(v);
  }
  return out;
}

/// Class id, or "null" for the unconditional token.
inline ClassLabel parse_class_label(std::string_view text) {
  text = detail::trim(text);
  if (text == "null" || text == "none") return ClassLabel{};
  const auto v = detail::parse_index(text);
  if (!v) throw DomainError("malformed class '" + std::string(text) + "'");
  return ClassLabel{*v};
}

/// CSV with header "cond,seed"; cond is a class id or "null".
inline std::vector<PromptSeedPair> parse_pairs_csv(std::string_view text) {
  std::vector<PromptSeedPair> pairs;
  bool header = true;
  for (std::string_view line : detail::split(text, '\n')) {
    if (line.empty() || line.front() == '#') continue;
    if (header) {
      header = false;
      if (line != "cond,seed") throw FormatError("pairs file must start with the header cond,seed");
      continue;
    }
    const auto cells = detail::split(line, ',');
    if (cells.size() != 2) throw FormatError("pairs row '" + std::string(line) + "' needs two cells");
    const auto seed = detail::parse_index(cells[1]);
    if (!seed) throw FormatError("pairs row '" + std::string(line) + "' has a malformed seed");
    try {
      pairs.push_back({parse_class_label(cells[0]), *seed});
    } catch (const DomainError& e) {
      throw FormatError(e.what());
    }
  }
  if (pairs.empty()) throw FormatError("pairs file lists no pairs");
  return pairs;
}

inline std::string pairs_csv(const std::vector<PromptSeedPair>& pairs) {
  std::string out = "cond,seed\n";
  for (const PromptSeedPair& p : pairs)
    out += (p.cond ? std::to_string(*p.cond) : std::string("null")) + "," + std::to_string(p.seed) + "\n";
  return out;
}

/// round,heads,mean_score; heads as space-separated l:h.
inline std::string round_curve_csv(const std::vector<RoundEvaluation>& curve) {
  std::string out = "round,heads,mean_score\n";
  for (const RoundEvaluation& r : curve) {
    std::string heads;
    for (HeadId h : r.heads) heads += (heads.empty() ? "" : " ") + to_string(h);
    out += std::to_string(r.round) + "," + heads + "," + format_double(r.mean_score) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run configs

struct RunConfig {
  DitConfig model;
  TrainConfig train;
  std::size_t dataset_size = 512;
  std::uint64_t data_seed = 1000;
  std::uint64_t init_seed = 0;
  SynthOptions synth;
};

/// Every key is required; a missing or mistyped one raises ConfigError naming it.
inline RunConfig parse_run_config(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("", std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("", "config must be a JSON object");
  for (const char* section : {"model", "train", "data"})
    if (!j.contains(section) || !j.at(section).is_object())
      throw ConfigError(section, std::string("missing config key '") + section + "'");

  RunConfig rc;
  rc.model = config_from_json(j.at("model"), "model");
  const auto& t = j.at("train");
  rc.train.batch = detail::required_size(t, "batch", "train");
  rc.train.steps = detail::required_size(t, "steps", "train");
  rc.train.lr = detail::required<nlohmann::json, double>(t, "lr", "train");
  rc.train.beta1 = detail::required<nlohmann::json, double>(t, "beta1", "train");
  rc.train.beta2 = detail::required<nlohmann::json, double>(t, "beta2", "train");
  rc.train.adam_eps = detail::required<nlohmann::json, double>(t, "adam_eps", "train");
  rc.train.cfg_dropout = detail::required<nlohmann::json, double>(t, "cfg_dropout", "train");
  rc.train.seed = detail::required_size(t, "seed", "train");
  rc.train.log_every = detail::required_size(t, "log_every", "train");
  rc.train.divergence_loss = detail::required<nlohmann::json, double>(t, "divergence_loss", "train");
  rc.init_seed = detail::required_size(t, "init_seed", "train");
  const auto& d = j.at("data");
  rc.dataset_size = detail::required_size(d, "size", "data");
  rc.data_seed = detail::required_size(d, "seed", "data");
  rc.synth.jitter = detail::required<nlohmann::json, bool>(d, "jitter", "data");
  rc.synth.noise_stddev = detail::required<nlohmann::json, double>(d, "noise_stddev", "data");

  try {
    rc.model.validate();
    rc.train.validate();
  } catch (const DomainError& e) {
    throw ConfigError("", e.what());
  }
  if (rc.dataset_size == 0) throw ConfigError("data.size", "data.size must be positive");
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  const Bytes b = read_file(path);
  return parse_run_config(std::string_view(reinterpret_cast<const char*>(b.data()), b.size()));
}

}  // namespace headlab

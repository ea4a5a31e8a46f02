#include "loopq/io.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstring>
#include <iomanip>
#include <sstream>

#include "loopq/errors.hpp"
#include "loopq/experiment.hpp"

namespace loopq {

namespace fs = std::filesystem;
using nlohmann::json;

// --------------------------------------------------------------- hashing

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) throw IoError("SHA-256 init failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx_, data, n) != 1) throw IoError("SHA-256 update failed");
  }
  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_, md.data(), &len) != 1) throw IoError("SHA-256 final failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return os.str();
  }

 private:
  EVP_MD_CTX* ctx_;
};

}  // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string sha256_hex(std::string_view text) {
  Sha256 h;
  h.update(text.data(), text.size());
  return h.hex();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Sha256 h;
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

// --------------------------------------------------------------- checkpoints

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

struct Named {
  std::string name;
  const Tensor* tensor;
};

const char* const kBlockNames[] = {"attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down"};

std::vector<std::string> model_tensor_names(const ModelConfig& c) {
  std::vector<std::string> names{"embed", "proj"};
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    if (c.kind == LayerKind::linear) names.push_back(p + "w");
    else
      for (const char* n : kBlockNames) names.push_back(p + n);
  }
  return names;
}

std::string loop_tag(std::size_t t) { return "loop" + std::to_string(t); }

void push_transform(std::vector<Named>& out, json& modes, const TransformParam& p, const std::string& prefix) {
  modes.push_back({{"mode", transform_mode_name(p.mode)}, {"kronecker", p.kronecker}});
  out.push_back({prefix + ".a", &p.a});
  out.push_back({prefix + ".b", &p.b});
}

json scheme_header(const QuantScheme& s, std::vector<Named>& out) {
  json groups = json::array();
  for (std::size_t g = 0; g < s.groups.size(); ++g) {
    const GroupScheme& gs = s.groups[g];
    const std::string p = "group" + std::to_string(g);
    json transforms = json::array();
    if (gs.transform_untied())
      for (std::size_t t = 0; t < gs.per_loop.size(); ++t)
        push_transform(out, transforms, gs.per_loop[t], p + ".transform." + loop_tag(t));
    else
      push_transform(out, transforms, *gs.shared, p + ".transform.shared");
    if (gs.scales_per_loop())
      for (std::size_t t = 0; t < gs.loop_scales.size(); ++t)
        out.push_back({p + ".scale." + loop_tag(t), &gs.loop_scales[t]});
    else
      out.push_back({p + ".scale.shared", &gs.shared_scale});
    groups.push_back({{"layer", gs.id.layer},
                      {"kind", group_kind_name(gs.id.kind)},
                      {"in_dim", gs.in_dim},
                      {"transform_per_loop", gs.transform_untied()},
                      {"transforms", transforms},
                      {"scales_per_loop", gs.scales_per_loop()},
                      {"scale_count", gs.scales_per_loop() ? gs.loop_scales.size() : 1}});
  }
  return {{"spec", {{"bits_w", s.spec.bits_w}, {"bits_a", s.spec.bits_a}, {"group_size", s.spec.group_size}}},
          {"loops", s.loops},
          {"groups", groups}};
}

json adapter_header(const TransitionAdapters& ad, std::vector<Named>& out) {
  for (std::size_t t = 0; t < ad.transitions(); ++t) {
    out.push_back({"cta.a." + loop_tag(t), &ad.a[t]});
    out.push_back({"cta.b." + loop_tag(t), &ad.b[t]});
    out.push_back({"cta.eta." + loop_tag(t), &ad.eta[t]});
  }
  out.push_back({"cta.u", &ad.u});
  out.push_back({"cta.v", &ad.v});
  return {{"rank", ad.rank}, {"norm_eps", ad.norm_eps}, {"transitions", ad.transitions()}};
}

/// Header JSON plus the ordered tensor list it describes.
json build_header(const Checkpoint& ck, std::vector<Named>& tensors) {
  const auto names = model_tensor_names(ck.model.config);
  const auto ptrs = ck.model.tensors();
  if (names.size() != ptrs.size()) throw ContractError("model does not match its config");
  for (std::size_t i = 0; i < ptrs.size(); ++i) tensors.push_back({names[i], ptrs[i]});
  json h;
  h["seed"] = ck.seed;
  h["model"] = model_config_to_json(ck.model.config);
  h["scheme"] = ck.scheme ? scheme_header(*ck.scheme, tensors) : json(nullptr);
  h["adapters"] = adapter_header(ck.adapters, tensors);
  h["meta"] = ck.meta;
  json list = json::array();
  for (const Named& n : tensors) list.push_back({{"name", n.name}, {"shape", n.tensor->shape()}});
  h["tensors"] = list;
  return h;
}

std::string tensor_payload(const std::vector<Named>& tensors) {
  std::string out;
  for (const Named& n : tensors)
    for (double v : n.tensor->data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

Tensor read_tensor(const json& shape_json, const char*& p, const char* end) {
  const auto shape = shape_json.get<Tensor::Shape>();
  if (shape.empty()) return Tensor();
  std::size_t n = 1;
  for (std::size_t s : shape) n *= s;
  if (static_cast<std::size_t>(end - p) < 8 * n) throw IoError("checkpoint payload is truncated");
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i, p += 8) data[i] = std::bit_cast<double>(get_u64(p));
  return Tensor(shape, std::move(data));
}

class TensorReader {
 public:
  TensorReader(const json& list, const char* begin, const char* end) : list_(list), p_(begin), end_(end) {}

  Tensor next(const std::string& expected) {
    if (i_ >= list_.size()) throw IoError("checkpoint has too few tensors");
    const json& e = list_[i_++];
    if (e.at("name").get<std::string>() != expected)
      throw IoError("checkpoint tensor '" + e.at("name").get<std::string>() + "' where '" + expected + "' was expected");
    return read_tensor(e.at("shape"), p_, end_);
  }
  void finish() const {
    if (i_ != list_.size() || p_ != end_) throw IoError("checkpoint has trailing data");
  }

 private:
  const json& list_;
  std::size_t i_ = 0;
  const char* p_;
  const char* end_;
};

TransformParam read_transform(const json& mode, TensorReader& r, const std::string& prefix) {
  TransformParam p;
  p.mode = parse_transform_mode(mode.at("mode").get<std::string>());
  p.kronecker = mode.at("kronecker").get<bool>();
  p.a = r.next(prefix + ".a");
  p.b = r.next(prefix + ".b");
  return p;
}

QuantScheme read_scheme(const json& h, TensorReader& r) {
  QuantScheme s;
  s.spec.bits_w = h.at("spec").at("bits_w").get<int>();
  s.spec.bits_a = h.at("spec").at("bits_a").get<int>();
  s.spec.group_size = h.at("spec").at("group_size").get<std::size_t>();
  s.loops = h.at("loops").get<std::size_t>();
  const json& groups = h.at("groups");
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const json& gj = groups[g];
    const std::string p = "group" + std::to_string(g);
    GroupScheme gs;
    gs.id.layer = gj.at("layer").get<std::size_t>();
    gs.id.kind = parse_group_kind(gj.at("kind").get<std::string>());
    gs.in_dim = gj.at("in_dim").get<std::size_t>();
    const json& modes = gj.at("transforms");
    if (gj.at("transform_per_loop").get<bool>())
      for (std::size_t t = 0; t < modes.size(); ++t)
        gs.per_loop.push_back(read_transform(modes[t], r, p + ".transform." + loop_tag(t)));
    else
      gs.shared = read_transform(modes.at(0), r, p + ".transform.shared");
    const std::size_t n = gj.at("scale_count").get<std::size_t>();
    if (gj.at("scales_per_loop").get<bool>())
      for (std::size_t t = 0; t < n; ++t) gs.loop_scales.push_back(r.next(p + ".scale." + loop_tag(t)));
    else
      gs.shared_scale = r.next(p + ".scale.shared");
    s.groups.push_back(std::move(gs));
  }
  return s;
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  std::vector<Named> tensors;
  json header = build_header(ckpt, tensors);
  const std::string payload = tensor_payload(tensors);
  header["payload_sha256"] = sha256_hex(payload);
  const std::string head = header.dump();

  std::string bytes(kCheckpointMagic);
  bytes.push_back(static_cast<char>(kCheckpointVersion));
  put_u64(bytes, head.size());
  bytes += head;
  bytes += payload;

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
  out.close();
  fs::path sidecar = path;
  sidecar += ".json";
  header["format_version"] = kCheckpointVersion;
  write_json(sidecar, header);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t fixed = kCheckpointMagic.size() + 1 + 8;
  if (bytes.size() < fixed || std::string_view(bytes).substr(0, kCheckpointMagic.size()) != kCheckpointMagic)
    throw IoError(path.string() + " is not a checkpoint");
  const auto version = static_cast<std::uint8_t>(bytes[kCheckpointMagic.size()]);
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  const std::uint64_t head_len = get_u64(bytes.data() + kCheckpointMagic.size() + 1);
  if (head_len > bytes.size() - fixed) throw IoError("checkpoint header is truncated");

  json h;
  try {
    h = json::parse(bytes.begin() + fixed, bytes.begin() + static_cast<std::ptrdiff_t>(fixed + head_len));
  } catch (const json::exception& e) {
    throw IoError(std::string("bad checkpoint header: ") + e.what());
  }
  const char* begin = bytes.data() + fixed + head_len;
  const char* end = bytes.data() + bytes.size();
  if (sha256_hex(std::string_view(begin, static_cast<std::size_t>(end - begin))) != h.at("payload_sha256"))
    throw IoError("checkpoint payload hash mismatch in " + path.string());

  Checkpoint ck;
  try {
    ck.seed = h.at("seed").get<std::uint64_t>();
    ck.meta = h.at("meta");
    ck.model.config = model_config_from_json(h.at("model"));
    ck.model.layers.resize(ck.model.config.layers);
    TensorReader r(h.at("tensors"), begin, end);
    const auto names = model_tensor_names(ck.model.config);
    const auto slots = ck.model.tensors();
    for (std::size_t i = 0; i < slots.size(); ++i) *slots[i] = r.next(names[i]);
    if (!h.at("scheme").is_null()) ck.scheme = read_scheme(h.at("scheme"), r);
    const json& a = h.at("adapters");
    ck.adapters.rank = a.at("rank").get<std::size_t>();
    ck.adapters.norm_eps = a.at("norm_eps").get<double>();
    for (std::size_t t = 0; t < a.at("transitions").get<std::size_t>(); ++t) {
      ck.adapters.a.push_back(r.next("cta.a." + loop_tag(t)));
      ck.adapters.b.push_back(r.next("cta.b." + loop_tag(t)));
      ck.adapters.eta.push_back(r.next("cta.eta." + loop_tag(t)));
    }
    ck.adapters.u = r.next("cta.u");
    ck.adapters.v = r.next("cta.v");
    r.finish();
  } catch (const json::exception& e) {
    throw IoError(std::string("bad checkpoint header: ") + e.what());
  }
  if (ck.scheme) ck.scheme->validate(ck.model.config);
  return ck;
}

std::string checkpoint_tensor_hash(const Checkpoint& ckpt) {
  std::vector<Named> tensors;
  build_header(ckpt, tensors);
  return sha256_hex(tensor_payload(tensors));
}

// --------------------------------------------------------------- CSV

const CsvSchema& trajectory_schema() {
  static const CsvSchema s{"trajectory", 1, {"t", "layer", "rel_err", "eps_t", "eps_quant", "gamma"}};
  return s;
}
const CsvSchema& calibration_schema() {
  static const CsvSchema s{
      "calibration", 1, {"step", "total", "kl", "hidden", "final_target", "transition", "grad_norm", "lr_scale"}};
  return s;
}
const CsvSchema& drift_schema() {
  static const CsvSchema s{"drift", 1, {"t", "layer", "p99", "p99_normalized", "top_eig_cosine"}};
  return s;
}
const CsvSchema& sharing_gap_schema() {
  static const CsvSchema s{"sharing_gap", 1, {"round", "group", "name", "score", "rank"}};
  return s;
}
const CsvSchema& sweep_schema() {
  static const CsvSchema s{"sweep", 1, {"axis", "value", "arm", "seed", "final_rel_err", "final_loss"}};
  return s;
}
const CsvSchema& pretrain_schema() {
  static const CsvSchema s{"pretrain", 1, {"step", "loss"}};
  return s;
}

std::vector<const CsvSchema*> all_csv_schemas() {
  return {&trajectory_schema(), &calibration_schema(), &drift_schema(),
          &sharing_gap_schema(), &sweep_schema(),      &pretrain_schema()};
}

CsvWriter::CsvWriter(const fs::path& path, const CsvSchema& schema) : columns_(schema.columns.size()) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  out_.open(path, std::ios::trunc);
  if (!out_) throw IoError("cannot write " + path.string());
  for (std::size_t i = 0; i < columns_; ++i) out_ << (i ? "," : "") << schema.columns[i];
  out_ << '\n';
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  if (cells.size() != columns_) throw ContractError("CSV row has the wrong number of cells");
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (cells[i].find_first_of(",\"\n") != std::string::npos) throw ContractError("CSV cell needs quoting");
    out_ << (i ? "," : "") << cells[i];
  }
  out_ << '\n';
  if (!out_) throw IoError("CSV write failed");
}

std::string CsvWriter::cell(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string CsvWriter::cell(std::size_t v) { return std::to_string(v); }

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::vector<std::string> read_header(std::ifstream& in, const fs::path& path) {
  std::string line;
  if (!std::getline(in, line)) throw IoError(path.string() + " is empty");
  return split_line(line);
}

bool header_matches(const std::vector<std::string>& header, const CsvSchema& schema) {
  if (header.size() != schema.columns.size()) return false;
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] != schema.columns[i]) return false;
  return true;
}

void check_rows(std::ifstream& in, const fs::path& path, std::size_t columns) {
  std::string line;
  for (std::size_t n = 2; std::getline(in, line); ++n)
    if (split_line(line).size() != columns)
      throw IoError(path.string() + ":" + std::to_string(n) + ": expected " + std::to_string(columns) + " cells");
}

}  // namespace

void check_csv(const fs::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  if (!header_matches(read_header(in, path), schema))
    throw IoError(path.string() + " does not have the " + std::string(schema.name) + " header");
  check_rows(in, path, schema.columns.size());
}

const CsvSchema& check_csv_any(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  const auto header = read_header(in, path);
  for (const CsvSchema* s : all_csv_schemas())
    if (header_matches(header, *s)) {
      check_rows(in, path, s->columns.size());
      return *s;
    }
  throw IoError(path.string() + " matches no known CSV schema");
}

void write_trajectory_csv(const fs::path& path, const std::vector<ErrorTrajectory>& trajs) {
  CsvWriter w(path, trajectory_schema());
  for (const ErrorTrajectory& tr : trajs)
    for (std::size_t t = 0; t < tr.loops(); ++t)
      for (std::size_t l = 0; l < tr.rel_err[t].size(); ++l)
        w.row({CsvWriter::cell(t), CsvWriter::cell(l), CsvWriter::cell(tr.rel_err[t][l]), CsvWriter::cell(tr.eps[t]),
               CsvWriter::cell(tr.eps_quant[t]), CsvWriter::cell(tr.gamma[t])});
}

void write_calibration_csv(const fs::path& path, const CalibrationReport& report) {
  CsvWriter w(path, calibration_schema());
  for (const CalibrationStep& s : report.steps)
    w.row({CsvWriter::cell(s.step), CsvWriter::cell(s.loss.total), CsvWriter::cell(s.loss.kl),
           CsvWriter::cell(s.loss.hidden), CsvWriter::cell(s.loss.final_target), CsvWriter::cell(s.loss.transition),
           CsvWriter::cell(s.grad_norm), CsvWriter::cell(s.lr_scale)});
}

void write_drift_csv(const fs::path& path, const DriftStats& stats) {
  CsvWriter w(path, drift_schema());
  for (const DriftRow& r : stats.rows)
    w.row({CsvWriter::cell(r.t), CsvWriter::cell(r.layer), CsvWriter::cell(r.p99), CsvWriter::cell(r.p99_normalized),
           CsvWriter::cell(r.top_eig_cosine)});
}

void write_sharing_gap_csv(const fs::path& path, const std::vector<SharingGapReport>& rounds) {
  CsvWriter w(path, sharing_gap_schema());
  for (std::size_t r = 0; r < rounds.size(); ++r) {
    const SharingGapReport& rep = rounds[r];
    std::vector<std::size_t> order(rep.scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return rep.scores[a] > rep.scores[b]; });
    std::vector<std::size_t> rank(order.size());
    for (std::size_t k = 0; k < order.size(); ++k) rank[order[k]] = k + 1;
    for (std::size_t i = 0; i < rep.groups.size(); ++i)
      w.row({CsvWriter::cell(r), CsvWriter::cell(rep.groups[i]), rep.names[i], CsvWriter::cell(rep.scores[i]),
             CsvWriter::cell(rank[i])});
  }
}

void write_pretrain_csv(const fs::path& path, const PretrainReport& report) {
  CsvWriter w(path, pretrain_schema());
  for (std::size_t i = 0; i < report.losses.size(); ++i) w.row({CsvWriter::cell(i), CsvWriter::cell(report.losses[i])});
}

namespace {

json breakdown_json(const LossBreakdown& b) {
  return {{"total", b.total}, {"kl", b.kl}, {"hidden", b.hidden}, {"final_target", b.final_target},
          {"transition", b.transition}};
}

}  // namespace

json calibration_json(const CalibrationReport& r) {
  return {{"steps", r.steps.size()},
          {"initial", breakdown_json(r.initial)},
          {"final", breakdown_json(r.final)},
          {"initial_mu", r.initial_mu},
          {"final_mu", r.final_mu},
          {"parameter_norms", r.parameter_norms}};
}

json sharing_gap_json(const SelectionResult& sel, const QuantScheme& scheme) {
  json rounds = json::array();
  for (const SharingGapReport& r : sel.rounds) {
    json scores = json::object();
    for (std::size_t i = 0; i < r.groups.size(); ++i) scores[r.names[i]] = r.scores[i];
    rounds.push_back({{"eps", r.eps}, {"scores", scores}});
  }
  json selected = json::array();
  for (std::size_t g : sel.selected) selected.push_back(scheme.groups.at(g).id.name());
  return {{"selected", selected}, {"rounds", rounds}};
}

json trajectory_json(const ErrorTrajectory& tr) {
  return {{"rel_err", tr.rel_err},
          {"eps", tr.eps},
          {"eps_quant", tr.eps_quant},
          {"gamma", tr.gamma},
          {"final_loop_rel_err", tr.final_loop_rel_err()}};
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace loopq

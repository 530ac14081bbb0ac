#include "xs/io.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace xs {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts unsupported");

namespace {

std::string raw_name(const std::string& mhd_path) {
  fs::path p(mhd_path);
  p.replace_extension(".raw");
  return p.filename().string();
}

void write_mhd_header(const std::string& path, const VolumeMeta& meta) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  const int64_t d = meta.dims[0], h = meta.dims[1], w = meta.dims[2];
  os << "ObjectType = Image\n";
  os << "NDims = 3\n";
  os << "BinaryData = True\n";
  os << "BinaryDataByteOrderMSB = False\n";
  os << "CompressedData = False\n";
  os << "TransformMatrix = 1 0 0 0 1 0 0 0 1\n";
  os << "Offset = 0 0 0\n";
  // file order is x y z
  os << "ElementSpacing = " << meta.spacing[2] << " " << meta.spacing[1] << " "
     << meta.spacing[0] << "\n";
  os << "DimSize = " << w << " " << h << " " << d << "\n";
  if (meta.channels != 1) os << "ElementNumberOfChannels = " << meta.channels << "\n";
  os << "ElementType = " << (meta.type == VolumeMeta::Type::Float32 ? "MET_FLOAT" : "MET_UCHAR")
     << "\n";
  os << "ElementDataFile = " << raw_name(path) << "\n";
}

void write_raw(const std::string& mhd_path, const void* data, size_t bytes) {
  fs::path p(mhd_path);
  p.replace_extension(".raw");
  std::ofstream os(p, std::ios::binary);
  if (!os) throw FormatError("cannot open " + p.string() + " for writing");
  os.write(static_cast<const char*>(data), std::streamsize(bytes));
}

}  // namespace

void write_volume(const std::string& path, const Tensor<float>& vol,
                  const std::array<double, 3>& spacing) {
  VolumeMeta meta;
  meta.spacing = spacing;
  meta.type = VolumeMeta::Type::Float32;
  if (vol.rank() == 3) {
    meta.dims = vol.shape();
    meta.channels = 1;
    write_mhd_header(path, meta);
    write_raw(path, vol.data(), size_t(vol.numel()) * 4);
  } else if (vol.rank() == 4) {
    meta.dims = {vol.extent(1), vol.extent(2), vol.extent(3)};
    meta.channels = int(vol.extent(0));
    write_mhd_header(path, meta);
    // interleave channels per voxel for MetaImage convention
    const int64_t c = vol.extent(0), sp = vol.numel() / c;
    std::vector<float> inter(size_t(vol.numel()));
    for (int64_t v = 0; v < sp; ++v)
      for (int64_t ch = 0; ch < c; ++ch) inter[size_t(v * c + ch)] = vol[ch * sp + v];
    write_raw(path, inter.data(), inter.size() * 4);
  } else {
    throw ShapeError("write_volume: rank-3 or rank-4 tensor required");
  }
}

void write_volume(const std::string& path, const Tensor<uint8_t>& vol,
                  const std::array<double, 3>& spacing) {
  if (vol.rank() != 3) throw ShapeError("write_volume: rank-3 label volume required");
  VolumeMeta meta;
  meta.dims = vol.shape();
  meta.spacing = spacing;
  meta.type = VolumeMeta::Type::UInt8;
  write_mhd_header(path, meta);
  write_raw(path, vol.data(), size_t(vol.numel()));
}

VolumeMeta read_volume_meta(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path);
  VolumeMeta meta;
  meta.dims = {0, 0, 0};
  std::string line;
  bool have_dims = false, have_type = false;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "NDims") {
      if (val != "3") throw FormatError(path + ": NDims must be 3, got " + val);
    } else if (key == "BinaryDataByteOrderMSB" || key == "ElementByteOrderMSB") {
      if (val != "False") throw FormatError(path + ": big-endian data unsupported");
    } else if (key == "CompressedData") {
      if (val != "False") throw FormatError(path + ": compressed data unsupported");
    } else if (key == "DimSize") {
      std::istringstream vs(val);
      int64_t x, y, z;
      if (!(vs >> x >> y >> z)) throw FormatError(path + ": bad DimSize '" + val + "'");
      meta.dims = {z, y, x};
      have_dims = true;
    } else if (key == "ElementSpacing") {
      std::istringstream vs(val);
      double x, y, z;
      if (!(vs >> x >> y >> z)) throw FormatError(path + ": bad ElementSpacing");
      if (x <= 0 || y <= 0 || z <= 0) throw FormatError(path + ": spacing must be positive");
      meta.spacing = {z, y, x};
    } else if (key == "ElementNumberOfChannels") {
      meta.channels = std::stoi(val);
    } else if (key == "ElementType") {
      if (val == "MET_FLOAT") meta.type = VolumeMeta::Type::Float32;
      else if (val == "MET_UCHAR") meta.type = VolumeMeta::Type::UInt8;
      else throw FormatError(path + ": unsupported ElementType " + val);
      have_type = true;
    } else if (key == "ElementDataFile") {
      // resolved relative to the header below
    }
  }
  if (!have_dims || !have_type) throw FormatError(path + ": missing DimSize or ElementType");
  return meta;
}

namespace {

std::vector<char> read_raw_payload(const std::string& path, const VolumeMeta& meta,
                                   size_t elem_size) {
  fs::path p(path);
  p.replace_extension(".raw");
  std::ifstream is(p, std::ios::binary | std::ios::ate);
  if (!is) throw FormatError("cannot open " + p.string());
  const auto bytes = size_t(is.tellg());
  const size_t expect =
      size_t(meta.dims[0] * meta.dims[1] * meta.dims[2]) * size_t(meta.channels) * elem_size;
  if (bytes != expect) {
    throw FormatError(path + ": raw payload is " + std::to_string(bytes) + " bytes, header (" +
                      "DimSize x channels x element size) implies " + std::to_string(expect));
  }
  std::vector<char> buf(bytes);
  is.seekg(0);
  is.read(buf.data(), std::streamsize(bytes));
  return buf;
}

}  // namespace

Tensor<float> read_volume_float(const std::string& path, std::array<double, 3>* spacing) {
  const VolumeMeta meta = read_volume_meta(path);
  if (meta.type != VolumeMeta::Type::Float32)
    throw FormatError(path + ": expected MET_FLOAT volume");
  auto buf = read_raw_payload(path, meta, 4);
  if (spacing) *spacing = meta.spacing;
  const int64_t sp = meta.dims[0] * meta.dims[1] * meta.dims[2];
  if (meta.channels == 1) {
    Tensor<float> out = Tensor<float>::uninit(meta.dims);
    std::memcpy(out.data(), buf.data(), buf.size());
    return out;
  }
  Tensor<float> out = Tensor<float>::uninit({meta.channels, meta.dims[0], meta.dims[1], meta.dims[2]});
  const float* inter = reinterpret_cast<const float*>(buf.data());
  for (int64_t v = 0; v < sp; ++v)
    for (int64_t c = 0; c < meta.channels; ++c) out[c * sp + v] = inter[v * meta.channels + c];
  return out;
}

Tensor<uint8_t> read_volume_labels(const std::string& path, std::array<double, 3>* spacing) {
  const VolumeMeta meta = read_volume_meta(path);
  if (meta.type != VolumeMeta::Type::UInt8)
    throw FormatError(path + ": expected MET_UCHAR label volume");
  if (meta.channels != 1) throw FormatError(path + ": label volumes are single channel");
  auto buf = read_raw_payload(path, meta, 1);
  if (spacing) *spacing = meta.spacing;
  Tensor<uint8_t> out = Tensor<uint8_t>::uninit(meta.dims);
  std::memcpy(out.data(), buf.data(), buf.size());
  return out;
}

// ---------------------------------------------------------------------------
// checkpoint
// ---------------------------------------------------------------------------
namespace {

constexpr char kMagic[4] = {'X', 'S', 'J', 'R'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_i64(std::ostream& os, int64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void put_f32(std::ostream& os, float v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}
void put_blob(std::ostream& os, const std::string& name, const Tensor<float>& t) {
  put_str(os, name);
  put_u32(os, uint32_t(t.rank()));
  for (int i = 0; i < t.rank(); ++i) put_i64(os, t.extent(i));
  os.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.numel() * 4));
}

uint32_t get_u32(std::istream& is) {
  uint32_t v;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
int64_t get_i64(std::istream& is) {
  int64_t v;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
float get_f32(std::istream& is) {
  float v;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
std::string get_str(std::istream& is) {
  const uint32_t n = get_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}
Tensor<float> get_blob(std::istream& is, std::string* name) {
  *name = get_str(is);
  const uint32_t rank = get_u32(is);
  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i) shape[i] = get_i64(is);
  Tensor<float> t = Tensor<float>::uninit(shape);
  is.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.numel() * 4));
  return t;
}

}  // namespace

void save_checkpoint(const std::string& path, const Network& net, const OptimizerState* opt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  const NetworkSpec& s = net.spec;
  put_u32(os, uint32_t(s.variant));
  for (int f : s.filters) put_u32(os, uint32_t(f));
  put_u32(os, uint32_t(s.input_patch));
  put_u32(os, uint32_t(s.num_structures));
  put_u32(os, uint32_t(s.crossstitch_layers.size()));
  for (int l : s.crossstitch_layers) put_u32(os, uint32_t(l));
  put_u32(os, s.seg_path_full_inputs ? 1 : 0);
  put_f32(os, s.leaky_slope);
  put_f32(os, s.bn_epsilon);
  put_f32(os, s.bn_momentum);
  put_u32(os, net.bn_initialized ? 1 : 0);
  put_u32(os, uint32_t(net.params.size()));
  for (const auto& [name, t] : net.params) put_blob(os, name, t);
  put_u32(os, uint32_t(net.stats.size()));
  for (const auto& [name, t] : net.stats) put_blob(os, name, t);
  put_u32(os, opt ? 1 : 0);
  if (opt) {
    put_i64(os, opt->step);
    put_u32(os, uint32_t(opt->m.size()));
    for (const auto& [name, t] : opt->m) put_blob(os, name, t);
    put_u32(os, uint32_t(opt->v.size()));
    for (const auto& [name, t] : opt->v) put_blob(os, name, t);
  }
  if (!os) throw FormatError("short write to " + path);
}

Network load_checkpoint(const std::string& path, OptimizerState* opt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path + ": not a checkpoint (bad magic)");
  const uint32_t version = get_u32(is);
  if (version != kVersion) throw FormatError(path + ": unsupported checkpoint version");
  Network net;
  NetworkSpec& s = net.spec;
  s.variant = Variant(get_u32(is));
  for (int& f : s.filters) f = int(get_u32(is));
  s.input_patch = int(get_u32(is));
  s.num_structures = int(get_u32(is));
  s.crossstitch_layers.resize(get_u32(is));
  for (int& l : s.crossstitch_layers) l = int(get_u32(is));
  s.seg_path_full_inputs = get_u32(is) != 0;
  s.leaky_slope = get_f32(is);
  s.bn_epsilon = get_f32(is);
  s.bn_momentum = get_f32(is);
  net.bn_initialized = get_u32(is) != 0;
  const uint32_t np = get_u32(is);
  for (uint32_t i = 0; i < np; ++i) {
    std::string name;
    Tensor<float> t = get_blob(is, &name);
    net.params.emplace(std::move(name), std::move(t));
  }
  const uint32_t ns = get_u32(is);
  for (uint32_t i = 0; i < ns; ++i) {
    std::string name;
    Tensor<float> t = get_blob(is, &name);
    net.stats.emplace(std::move(name), std::move(t));
  }
  const uint32_t has_opt = get_u32(is);
  if (has_opt && opt) {
    opt->step = get_i64(is);
    const uint32_t nm = get_u32(is);
    for (uint32_t i = 0; i < nm; ++i) {
      std::string name;
      Tensor<float> t = get_blob(is, &name);
      opt->m.emplace(std::move(name), std::move(t));
    }
    const uint32_t nv = get_u32(is);
    for (uint32_t i = 0; i < nv; ++i) {
      std::string name;
      Tensor<float> t = get_blob(is, &name);
      opt->v.emplace(std::move(name), std::move(t));
    }
  }
  if (!is) throw FormatError(path + ": truncated checkpoint");
  return net;
}

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------
void write_manifest(const std::string& path, const Manifest& m) {
  json j;
  j["spacing"] = {m.spacing[2], m.spacing[1], m.spacing[0]};  // x y z, like the headers
  j["structures"] = m.structures;
  j["pairs"] = json::array();
  for (const auto& e : m.pairs) {
    json je;
    je["id"] = e.id;
    je["seed"] = e.seed;
    je["fixed"] = e.fixed;
    je["moving"] = e.moving;
    je["fixed_seg"] = e.fixed_seg;
    je["moving_seg"] = e.moving_seg;
    if (!e.dvf.empty()) je["dvf"] = e.dvf;
    j["pairs"].push_back(je);
  }
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os << j.dump(2) << "\n";
}

Manifest read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  Manifest m;
  const auto sp = j.at("spacing");
  m.spacing = {sp.at(2).get<double>(), sp.at(1).get<double>(), sp.at(0).get<double>()};
  m.structures = j.at("structures").get<std::vector<std::string>>();
  for (const auto& je : j.at("pairs")) {
    ManifestEntry e;
    e.id = je.at("id").get<std::string>();
    e.seed = je.at("seed").get<uint64_t>();
    e.fixed = je.at("fixed").get<std::string>();
    e.moving = je.at("moving").get<std::string>();
    e.fixed_seg = je.at("fixed_seg").get<std::string>();
    e.moving_seg = je.at("moving_seg").get<std::string>();
    if (je.contains("dvf")) e.dvf = je.at("dvf").get<std::string>();
    m.pairs.push_back(e);
  }
  return m;
}

std::vector<DataPair> load_dataset(const std::string& manifest_path,
                                   std::vector<std::string>* structures) {
  const Manifest m = read_manifest(manifest_path);
  if (structures) *structures = m.structures;
  const fs::path dir = fs::path(manifest_path).parent_path();
  std::vector<DataPair> out;
  for (const auto& e : m.pairs) {
    DataPair p;
    p.id = e.id;
    p.fixed = read_volume_float((dir / e.fixed).string(), &p.spacing);
    p.moving = read_volume_float((dir / e.moving).string(), nullptr);
    p.fixed_seg = read_volume_labels((dir / e.fixed_seg).string(), nullptr);
    p.moving_seg = read_volume_labels((dir / e.moving_seg).string(), nullptr);
    check_same_shape(p.fixed, p.moving, "dataset pair");
    out.push_back(std::move(p));
  }
  return out;
}

void write_pair(const std::string& dir, const std::string& id, const PhantomPair& pair,
                const std::array<double, 3>& spacing, ManifestEntry* entry) {
  const fs::path d(dir);
  fs::create_directories(d);
  auto name = [&](const char* what, const char* ext) { return id + "_" + what + ext; };
  write_volume((d / name("fixed", ".mhd")).string(), pair.fixed, spacing);
  write_volume((d / name("moving", ".mhd")).string(), pair.moving, spacing);
  write_volume((d / name("fixed_seg", ".mhd")).string(), pair.fixed_seg, spacing);
  write_volume((d / name("moving_seg", ".mhd")).string(), pair.moving_seg, spacing);
  write_volume((d / name("dvf", ".mhd")).string(), pair.dvf_star, spacing);
  if (entry) {
    entry->id = id;
    entry->seed = pair.seed;
    entry->fixed = name("fixed", ".mhd");
    entry->moving = name("moving", ".mhd");
    entry->fixed_seg = name("fixed_seg", ".mhd");
    entry->moving_seg = name("moving_seg", ".mhd");
    entry->dvf = name("dvf", ".mhd");
  }
}

// ---------------------------------------------------------------------------
// run config
// ---------------------------------------------------------------------------
void TrainConfig::validate() const {
  net.validate();
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  if (!(opt.lr > 0)) throw ConfigError("learning rate must be positive");
  if (batch_pairs < 1) throw ConfigError("batch_pairs must be >= 1");
  if (n_patch < 44 || n_patch % 4 != 0)
    throw ConfigError("n_patch must be >= 44 and divisible by 4");
}

namespace {

void reject_unknown(const json& j, const std::vector<std::string>& allowed,
                    const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      throw ConfigError("unknown config key '" + it.key() + "' in " + where);
    }
  }
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown(j, {"network", "training", "loss", "phantom"}, "top level");
  RunConfig rc;
  if (j.contains("network")) {
    const json& n = j["network"];
    reject_unknown(n,
                   {"variant", "filters", "input_patch", "num_structures", "crossstitch_layers",
                    "seg_path_full_inputs", "leaky_slope", "bn_epsilon", "bn_momentum"},
                   "network");
    NetworkSpec& s = rc.train.net;
    if (n.contains("variant")) s.variant = parse_variant(n["variant"].get<std::string>());
    if (n.contains("filters")) {
      auto f = n["filters"].get<std::vector<int>>();
      if (f.size() != 5) throw ConfigError("filters must have 5 entries");
      std::copy(f.begin(), f.end(), s.filters.begin());
    }
    if (n.contains("input_patch")) s.input_patch = n["input_patch"].get<int>();
    if (n.contains("num_structures")) s.num_structures = n["num_structures"].get<int>();
    if (n.contains("crossstitch_layers"))
      s.crossstitch_layers = n["crossstitch_layers"].get<std::vector<int>>();
    if (n.contains("seg_path_full_inputs"))
      s.seg_path_full_inputs = n["seg_path_full_inputs"].get<bool>();
    if (n.contains("leaky_slope")) s.leaky_slope = n["leaky_slope"].get<float>();
    if (n.contains("bn_epsilon")) s.bn_epsilon = n["bn_epsilon"].get<float>();
    if (n.contains("bn_momentum")) s.bn_momentum = n["bn_momentum"].get<float>();
  }
  if (j.contains("training")) {
    const json& t = j["training"];
    reject_unknown(t,
                   {"n_patch", "iterations", "batch_pairs", "learning_rate", "seed",
                    "checkpoint_interval"},
                   "training");
    if (t.contains("n_patch")) rc.train.n_patch = t["n_patch"].get<int64_t>();
    if (t.contains("iterations")) rc.train.iterations = t["iterations"].get<int64_t>();
    if (t.contains("batch_pairs")) rc.train.batch_pairs = t["batch_pairs"].get<int64_t>();
    if (t.contains("learning_rate")) rc.train.opt.lr = t["learning_rate"].get<double>();
    if (t.contains("seed")) rc.train.seed = t["seed"].get<uint64_t>();
    if (t.contains("checkpoint_interval"))
      rc.train.checkpoint_interval = t["checkpoint_interval"].get<int64_t>();
  }
  if (j.contains("loss")) {
    const json& l = j["loss"];
    reject_unknown(l, {"w_dice", "w_ncc", "w_bend", "resolution_weights"}, "loss");
    if (l.contains("w_dice")) rc.train.w_dice = l["w_dice"].get<double>();
    if (l.contains("w_ncc")) rc.train.w_ncc = l["w_ncc"].get<double>();
    if (l.contains("w_bend")) rc.train.w_bend = l["w_bend"].get<double>();
    if (l.contains("resolution_weights")) {
      auto rw = l["resolution_weights"].get<std::vector<double>>();
      if (rw.size() != 3) throw ConfigError("resolution_weights must have 3 entries");
      std::copy(rw.begin(), rw.end(), rc.train.resolution_weights.begin());
    }
  }
  if (j.contains("phantom")) {
    const json& p = j["phantom"];
    reject_unknown(p,
                   {"size", "noise_sigma", "background_mean", "organ_means",
                    "deform_magnitude", "deform_smoothness", "bladder_extra", "organ_shift",
                    "independent_pair"},
                   "phantom");
    PhantomSpec& ps = rc.phantom;
    if (p.contains("size")) ps.size = p["size"].get<int64_t>();
    if (p.contains("noise_sigma")) ps.noise_sigma = p["noise_sigma"].get<double>();
    if (p.contains("background_mean")) ps.background_mean = p["background_mean"].get<double>();
    if (p.contains("organ_means")) {
      auto om = p["organ_means"].get<std::vector<double>>();
      if (om.size() != 4) throw ConfigError("organ_means must have 4 entries");
      std::copy(om.begin(), om.end(), ps.organ_means.begin());
    }
    if (p.contains("deform_magnitude")) {
      auto dm = p["deform_magnitude"].get<std::vector<double>>();
      if (dm.size() != 2) throw ConfigError("deform_magnitude must be [lo, hi]");
      ps.deform_magnitude_lo = dm[0];
      ps.deform_magnitude_hi = dm[1];
    }
    if (p.contains("deform_smoothness")) ps.deform_smoothness = p["deform_smoothness"].get<double>();
    if (p.contains("bladder_extra")) ps.bladder_extra = p["bladder_extra"].get<double>();
    if (p.contains("organ_shift")) {
      auto os = p["organ_shift"].get<std::vector<double>>();
      if (os.size() != 4) throw ConfigError("organ_shift must have 4 entries");
      std::copy(os.begin(), os.end(), ps.organ_shift.begin());
    }
    if (p.contains("independent_pair")) ps.independent_pair = p["independent_pair"].get<bool>();
  }
  rc.train.validate();
  rc.phantom.validate();
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace xs

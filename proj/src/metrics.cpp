#include "xs/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace xs {

double dsc(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth, uint8_t label,
           bool* both_empty) {
  check_same_shape(pred, truth, "dsc");
  int64_t p = 0, t = 0, both = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    const bool a = pred[i] == label;
    const bool b = truth[i] == label;
    p += a;
    t += b;
    both += a && b;
  }
  if (both_empty) *both_empty = (p == 0 && t == 0);
  if (p == 0 && t == 0) return 1.0;
  return 2.0 * double(both) / double(p + t);
}

std::vector<Coord> extract_surface(const Tensor<uint8_t>& labels, uint8_t label) {
  const Shape& s = labels.shape();
  const int64_t d = s[0], h = s[1], w = s[2];
  std::vector<Coord> surf;
  auto inside = [&](int64_t z, int64_t y, int64_t x) {
    if (z < 0 || z >= d || y < 0 || y >= h || x < 0 || x >= w) return false;
    return labels[(z * h + y) * w + x] == label;
  };
  for (int64_t z = 0; z < d; ++z)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        if (!inside(z, y, x)) continue;
        if (!inside(z - 1, y, x) || !inside(z + 1, y, x) || !inside(z, y - 1, x) ||
            !inside(z, y + 1, x) || !inside(z, y, x - 1) || !inside(z, y, x + 1)) {
          surf.push_back({z, y, x});
        }
      }
  if (surf.empty()) throw EmptyStructureError("empty structure for label " + std::to_string(label));
  return surf;
}

std::vector<double> surface_distances_brute(const std::vector<Coord>& from,
                                            const std::vector<Coord>& to,
                                            const std::array<double, 3>& spacing) {
  std::vector<double> out;
  out.reserve(from.size());
  for (const Coord& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const Coord& q : to) {
      const double dz = double(p[0] - q[0]) * spacing[0];
      const double dy = double(p[1] - q[1]) * spacing[1];
      const double dx = double(p[2] - q[2]) * spacing[2];
      const double d2 = dz * dz + dy * dy + dx * dx;
      if (d2 < best) best = d2;
    }
    out.push_back(std::sqrt(best));
  }
  return out;
}

namespace {

// Felzenszwalb-Huttenlocher 1D squared distance transform with anisotropic
// sample positions x_i = i * step. Empty sites carry a huge finite sentinel
// so the parabola arithmetic stays well defined; the sentinel never wins the
// lower envelope where a real site exists.
constexpr double kEdtHuge = 1e20;

void edt_1d(const std::vector<double>& f, double step, std::vector<double>& out,
            std::vector<int>& v, std::vector<double>& z) {
  const int n = int(f.size());
  v.assign(size_t(n), 0);
  z.assign(size_t(n) + 1, 0.0);
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  auto sq = [](double a) { return a * a; };
  for (int q = 1; q < n; ++q) {
    double s;
    for (;;) {
      const double xq = q * step, xv = v[size_t(k)] * step;
      s = (f[size_t(q)] + sq(xq) - f[size_t(v[size_t(k)])] - sq(xv)) / (2 * xq - 2 * xv);
      if (s <= z[size_t(k)] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    if (s <= z[size_t(k)] && k == 0) {
      v[0] = q;
      z[1] = std::numeric_limits<double>::infinity();
      continue;
    }
    ++k;
    v[size_t(k)] = q;
    z[size_t(k)] = s;
    z[size_t(k) + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  out.resize(size_t(n));
  for (int q = 0; q < n; ++q) {
    const double xq = q * step;
    while (z[size_t(k) + 1] < xq) ++k;
    const double xv = v[size_t(k)] * step;
    out[size_t(q)] = sq(xq - xv) + f[size_t(v[size_t(k)])];
  }
}

}  // namespace

std::vector<double> surface_distances_edt(const std::vector<Coord>& from,
                                          const std::vector<Coord>& to,
                                          const std::array<double, 3>& spacing,
                                          const Shape& dims) {
  const int64_t d = dims[0], h = dims[1], w = dims[2];
  std::vector<double> dist(size_t(d * h * w), kEdtHuge);
  for (const Coord& q : to) dist[size_t((q[0] * h + q[1]) * w + q[2])] = 0.0;

  std::vector<double> f, g;
  std::vector<int> v;
  std::vector<double> z;
  // x pass
  f.resize(size_t(w));
  for (int64_t zz = 0; zz < d; ++zz)
    for (int64_t y = 0; y < h; ++y) {
      double* row = dist.data() + (zz * h + y) * w;
      for (int64_t x = 0; x < w; ++x) f[size_t(x)] = row[x];
      edt_1d(f, spacing[2], g, v, z);
      for (int64_t x = 0; x < w; ++x) row[x] = g[size_t(x)];
    }
  // y pass
  f.resize(size_t(h));
  for (int64_t zz = 0; zz < d; ++zz)
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t y = 0; y < h; ++y) f[size_t(y)] = dist[size_t((zz * h + y) * w + x)];
      edt_1d(f, spacing[1], g, v, z);
      for (int64_t y = 0; y < h; ++y) dist[size_t((zz * h + y) * w + x)] = g[size_t(y)];
    }
  // z pass
  f.resize(size_t(d));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t zz = 0; zz < d; ++zz) f[size_t(zz)] = dist[size_t((zz * h + y) * w + x)];
      edt_1d(f, spacing[0], g, v, z);
      for (int64_t zz = 0; zz < d; ++zz) dist[size_t((zz * h + y) * w + x)] = g[size_t(zz)];
    }

  std::vector<double> out;
  out.reserve(from.size());
  for (const Coord& p : from)
    out.push_back(std::sqrt(dist[size_t((p[0] * h + p[1]) * w + p[2])]));
  return out;
}

namespace {

// Brute force is exact and fast for small structures; the transform wins on
// large ones. The crossover keeps both paths routinely exercised.
std::pair<std::vector<double>, std::vector<double>> directed_distance_sets(
    const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth, uint8_t label,
    const std::array<double, 3>& spacing) {
  check_same_shape(pred, truth, "surface distance");
  auto sp = extract_surface(pred, label);
  auto st = extract_surface(truth, label);
  const bool brute = sp.size() * st.size() <= 4096 * 64;
  if (brute) {
    return {surface_distances_brute(sp, st, spacing), surface_distances_brute(st, sp, spacing)};
  }
  return {surface_distances_edt(sp, st, spacing, pred.shape()),
          surface_distances_edt(st, sp, spacing, pred.shape())};
}

}  // namespace

double mean_surface_distance(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth,
                             uint8_t label, const std::array<double, 3>& spacing) {
  auto [dpt, dtp] = directed_distance_sets(pred, truth, label, spacing);
  double mp = 0, mt = 0;
  for (double v : dpt) mp += v;
  for (double v : dtp) mt += v;
  return 0.5 * (mp / double(dpt.size()) + mt / double(dtp.size()));
}

double percentile_linear(std::vector<double> values, double q) {
  std::sort(values.begin(), values.end());
  const int64_t n = int64_t(values.size());
  if (n == 1) return values[0];
  const double rank = q * double(n - 1);  // 0-based
  const int64_t lo = int64_t(std::floor(rank));
  const int64_t hi = std::min(lo + 1, n - 1);
  const double frac = rank - double(lo);
  return values[size_t(lo)] + frac * (values[size_t(hi)] - values[size_t(lo)]);
}

double hd95(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth, uint8_t label,
            const std::array<double, 3>& spacing) {
  auto [dpt, dtp] = directed_distance_sets(pred, truth, label, spacing);
  dpt.insert(dpt.end(), dtp.begin(), dtp.end());
  return percentile_linear(std::move(dpt), 0.95);
}

Aggregate aggregate_values(const std::vector<double>& values) {
  Aggregate a;
  a.cases = int(values.size());
  if (values.empty()) return a;
  double s = 0;
  for (double v : values) s += v;
  a.mean = s / double(values.size());
  double s2 = 0;
  for (double v : values) s2 += (v - a.mean) * (v - a.mean);
  a.stddev = std::sqrt(s2 / double(values.size()));
  std::vector<double> sorted(values);
  std::sort(sorted.begin(), sorted.end());
  const size_t n = sorted.size();
  a.median = (n % 2 == 1) ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  return a;
}

const MetricsRow* MetricsReport::find(const std::string& path,
                                      const std::string& structure) const {
  for (const MetricsRow& r : rows) {
    if (r.path == path && r.structure == structure) return &r;
  }
  return nullptr;
}

namespace {

std::string fmt(double v, int prec = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

}  // namespace

std::string format_report_table(const MetricsReport& report) {
  std::ostringstream os;
  struct MetricDef {
    const char* name;
    Aggregate (MetricsRow::*fn)() const;
  };
  const MetricDef metrics[] = {{"MSD (mm)", &MetricsRow::msd},
                               {"DSC", &MetricsRow::dsc},
                               {"95%HD (mm)", &MetricsRow::hd95}};
  // distinct (method, path) row identities preserving order
  std::vector<std::pair<std::string, std::string>> idents;
  for (const MetricsRow& r : report.rows) {
    std::pair<std::string, std::string> id{r.method, r.path};
    if (std::find(idents.begin(), idents.end(), id) == idents.end()) idents.push_back(id);
  }
  for (const auto& m : metrics) {
    os << "== " << m.name << " ==\n";
    os << "| Method | Output Path |";
    for (const auto& s : report.structures) os << " " << s << " u+-s | " << s << " Median |";
    os << "\n";
    for (const auto& [method, path] : idents) {
      os << "| " << method << " | " << path << " |";
      for (const auto& s : report.structures) {
        const MetricsRow* r = nullptr;
        for (const MetricsRow& cand : report.rows)
          if (cand.method == method && cand.path == path && cand.structure == s) r = &cand;
        if (!r || (r->*(m.fn))().cases == 0) {
          os << " - | - |";
        } else {
          const Aggregate a = (r->*(m.fn))();
          os << " " << fmt(a.mean) << " +- " << fmt(a.stddev) << " | " << fmt(a.median) << " |";
        }
      }
      os << "\n";
    }
    os << "\n";
  }
  os << "Failures (empty structure, excluded from surface metrics):\n";
  for (const MetricsRow& r : report.rows) {
    if (r.failures > 0)
      os << "  " << r.method << " / " << r.path << " / " << r.structure << ": " << r.failures
         << " case(s)\n";
  }
  return os.str();
}

std::string format_report_delimited(const MetricsReport& report) {
  std::ostringstream os;
  os << "method,path,structure,case,dsc,msd_mm,hd95_mm,failures\n";
  char buf[256];
  for (const MetricsRow& r : report.rows) {
    for (size_t i = 0; i < r.dsc_values.size(); ++i) {
      const double msd = i < r.msd_values.size() ? r.msd_values[i] : std::nan("");
      const double hd = i < r.hd95_values.size() ? r.hd95_values[i] : std::nan("");
      std::snprintf(buf, sizeof buf, "%s,%s,%s,%zu,%.17g,%.17g,%.17g,%d\n", r.method.c_str(),
                    r.path.c_str(), r.structure.c_str(), i, r.dsc_values[i], msd, hd,
                    r.failures);
      os << buf;
    }
    if (r.dsc_values.empty()) {
      std::snprintf(buf, sizeof buf, "%s,%s,%s,-1,nan,nan,nan,%d\n", r.method.c_str(),
                    r.path.c_str(), r.structure.c_str(), r.failures);
      os << buf;
    }
  }
  return os.str();
}

MetricsReport parse_report_delimited(const std::string& text) {
  MetricsReport rep;
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);  // header
  if (line != "method,path,structure,case,dsc,msd_mm,hd95_mm,failures")
    throw FormatError("unrecognized delimited report header: " + line);
  auto row_for = [&](const std::string& method, const std::string& path,
                     const std::string& structure) -> MetricsRow& {
    for (MetricsRow& r : rep.rows)
      if (r.method == method && r.path == path && r.structure == structure) return r;
    rep.rows.push_back({method, path, structure, {}, {}, {}, 0});
    if (std::find(rep.structures.begin(), rep.structures.end(), structure) ==
        rep.structures.end())
      rep.structures.push_back(structure);
    return rep.rows.back();
  };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> parts;
    std::stringstream ls(line);
    std::string tok;
    while (std::getline(ls, tok, ',')) parts.push_back(tok);
    if (parts.size() != 8) throw FormatError("bad delimited report line: " + line);
    MetricsRow& r = row_for(parts[0], parts[1], parts[2]);
    r.failures = std::stoi(parts[7]);
    if (parts[3] == "-1") continue;
    r.dsc_values.push_back(std::stod(parts[4]));
    if (parts[5] != "nan") r.msd_values.push_back(std::stod(parts[5]));
    if (parts[6] != "nan") r.hd95_values.push_back(std::stod(parts[6]));
  }
  return rep;
}

std::vector<ParsedTableEntry> parse_report_table(const std::string& text) {
  std::vector<ParsedTableEntry> out;
  std::istringstream is(text);
  std::string line, metric;
  std::vector<std::string> structures;
  while (std::getline(is, line)) {
    if (line.rfind("== ", 0) == 0) {
      metric = line.substr(3, line.size() - 6);
      structures.clear();
      continue;
    }
    if (line.rfind("| Method", 0) == 0) {
      // header: | Method | Output Path | S u+-s | S Median | ...
      std::stringstream ls(line);
      std::string cell;
      std::getline(ls, cell, '|');
      std::getline(ls, cell, '|');
      std::getline(ls, cell, '|');
      while (std::getline(ls, cell, '|')) {
        const auto pos = cell.find(" u+-s");
        if (pos != std::string::npos) structures.push_back(cell.substr(1, pos - 1));
        std::getline(ls, cell, '|');  // skip Median column header
      }
      continue;
    }
    if (line.rfind("| ", 0) == 0 && !metric.empty()) {
      std::stringstream ls(line);
      std::string cell;
      std::getline(ls, cell, '|');
      std::string method, path;
      std::getline(ls, method, '|');
      std::getline(ls, path, '|');
      auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(' ');
        const auto b = s.find_last_not_of(' ');
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      for (const std::string& st : structures) {
        std::string musig, median;
        if (!std::getline(ls, musig, '|') || !std::getline(ls, median, '|')) break;
        musig = trim(musig);
        median = trim(median);
        if (musig == "-") continue;
        ParsedTableEntry e;
        e.path = trim(path);
        e.structure = st;
        e.metric = metric;
        const auto pm = musig.find(" +- ");
        if (pm == std::string::npos) throw FormatError("bad table cell: " + musig);
        e.mean = std::stod(musig.substr(0, pm));
        e.stddev = std::stod(musig.substr(pm + 4));
        e.median = std::stod(median);
        e.failures = 0;
        out.push_back(e);
      }
    }
  }
  return out;
}

}  // namespace xs

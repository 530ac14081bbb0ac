#include "xs/phantom.hpp"

#include <algorithm>
#include <cmath>

#include "xs/warp.hpp"

namespace xs {

const std::array<const char*, 4> PhantomSpec::kOrganNames = {"bladder", "prostate", "vesicles",
                                                             "rectum"};

void PhantomSpec::validate() const {
  if (size < 32) throw ConfigError("phantom size must be >= 32");
  if (noise_sigma < 0) throw ConfigError("noise sigma must be nonnegative");
  if (deform_magnitude_lo < 0 || deform_magnitude_hi < deform_magnitude_lo)
    throw ConfigError("invalid deformation magnitude range");
  if (deform_smoothness <= 0) throw ConfigError("deformation smoothness must be positive");
  for (double m : organ_means) {
    if (m < 0 || m > 1) throw ConfigError("organ intensity means must be in [0,1]");
  }
}

namespace {

struct Ellipsoid {
  std::array<double, 3> center;  // voxels
  std::array<double, 3> radii;   // voxels
};

bool inside(const Ellipsoid& e, double z, double y, double x) {
  const double dz = (z - e.center[0]) / e.radii[0];
  const double dy = (y - e.center[1]) / e.radii[1];
  const double dx = (x - e.center[2]) / e.radii[2];
  return dz * dz + dy * dy + dx * dx <= 1.0;
}

// Paint label where the predicate holds and the voxel is still background.
template <typename Pred>
int64_t paint(Tensor<uint8_t>& labels, uint8_t label, Pred&& pred) {
  const Shape& s = labels.shape();
  int64_t count = 0;
  for (int64_t z = 0; z < s[0]; ++z)
    for (int64_t y = 0; y < s[1]; ++y)
      for (int64_t x = 0; x < s[2]; ++x) {
        uint8_t& v = labels[(z * s[1] + y) * s[2] + x];
        if (v == 0 && pred(double(z), double(y), double(x))) {
          v = label;
          ++count;
        }
      }
  return count;
}

}  // namespace

Phantom generate_phantom(const PhantomSpec& spec, uint64_t seed) {
  spec.validate();
  const int64_t n = spec.size;
  const double fs = double(n);
  Rng rng(seed ^ 0xa5a5a5a5ull);

  for (int attempt = 0; attempt < 10; ++attempt) {
    Tensor<uint8_t> labels({n, n, n});
    auto jit = [&](double lo, double hi) { return rng.uniform(lo, hi); };

    // bladder: large, volume varies a lot between seeds
    const double bscale = jit(0.80, 1.25);
    Ellipsoid bladder{{fs * (0.38 + jit(-0.02, 0.02)), fs * (0.50 + jit(-0.02, 0.02)),
                       fs * (0.36 + jit(-0.02, 0.02))},
                      {fs * 0.155 * bscale, fs * 0.150 * bscale, fs * 0.145 * bscale}};
    // prostate: medium ellipsoid below/behind the bladder
    Ellipsoid prostate{{fs * (0.56 + jit(-0.015, 0.015)), fs * (0.50 + jit(-0.015, 0.015)),
                        fs * (0.54 + jit(-0.015, 0.015))},
                       {fs * 0.105 * jit(0.9, 1.1), fs * 0.110 * jit(0.9, 1.1),
                        fs * 0.100 * jit(0.9, 1.1)}};
    // seminal vesicles: small twin lobes flanking the prostate top
    const double vz = 0.46 + jit(-0.01, 0.01), vx = 0.62 + jit(-0.01, 0.01);
    const double vr = fs * 0.048 * jit(0.9, 1.1);
    Ellipsoid lobe1{{fs * vz, fs * (0.40 + jit(-0.01, 0.01)), fs * vx}, {vr, vr * 1.4, vr}};
    Ellipsoid lobe2{{fs * vz, fs * (0.60 + jit(-0.01, 0.01)), fs * vx}, {vr, vr * 1.4, vr}};
    // rectum: curved tube along z behind everything
    const double ry0 = 0.50 + jit(-0.02, 0.02), rx0 = 0.78 + jit(-0.015, 0.015);
    const double amp = 0.05 * jit(0.6, 1.4), phase = jit(0.0, 6.283185307179586);
    const double rrad = fs * 0.050 * jit(0.9, 1.1);

    int64_t counts[4];
    counts[0] = paint(labels, 1, [&](double z, double y, double x) {
      return inside(bladder, z, y, x);
    });
    counts[1] = paint(labels, 2, [&](double z, double y, double x) {
      return inside(prostate, z, y, x);
    });
    counts[2] = paint(labels, 3, [&](double z, double y, double x) {
      return inside(lobe1, z, y, x) || inside(lobe2, z, y, x);
    });
    counts[3] = paint(labels, 4, [&](double z, double y, double x) {
      const double cy = fs * (ry0 + amp * std::sin(6.283185307179586 * z / fs + phase));
      const double cx = fs * (rx0 + 0.6 * amp * std::cos(6.283185307179586 * z / fs + phase));
      const double dy = y - cy, dx = x - cx;
      return dy * dy + dx * dx <= rrad * rrad;
    });

    bool ok = true;
    for (int64_t cnt : counts) ok = ok && cnt >= 50;
    if (!ok) continue;

    Phantom ph;
    ph.labels = std::move(labels);
    ph.volume = Tensor<float>::uninit({n, n, n});
    const double means[PhantomSpec::kNumLabels] = {spec.background_mean, spec.organ_means[0],
                                                   spec.organ_means[1], spec.organ_means[2],
                                                   spec.organ_means[3]};
    for (int64_t i = 0; i < ph.volume.numel(); ++i) {
      const double v = means[ph.labels[i]] + rng.normal(0.0, spec.noise_sigma);
      ph.volume[i] = float(std::clamp(v, 0.0, 1.0));
    }
    return ph;
  }
  throw GenerationError("structure placement failed after bounded retries");
}

namespace {

// separable Gaussian blur of a [3,D,H,W] field, truncated at 3 sigma
void gaussian_blur3(Tensor<float>& field, double sigma) {
  const Shape& s = field.shape();
  const int64_t d = s[1], h = s[2], w = s[3];
  const int64_t r = std::max<int64_t>(1, int64_t(std::ceil(3.0 * sigma)));
  std::vector<float> kern(size_t(2 * r + 1));
  double sum = 0;
  for (int64_t i = -r; i <= r; ++i) {
    const double v = std::exp(-0.5 * double(i * i) / (sigma * sigma));
    kern[size_t(i + r)] = float(v);
    sum += v;
  }
  for (auto& v : kern) v = float(double(v) / sum);

  Tensor<float> tmp = Tensor<float>::uninit(field.shape());
  auto pass = [&](const Tensor<float>& src, Tensor<float>& dst, int axis) {
    const int64_t strides[3] = {h * w, w, 1};
    const int64_t extents[3] = {d, h, w};
    const int64_t stride = strides[axis];
    const int64_t len = extents[axis];
    parallel_for(3 * (d * h * w / len), [&](int64_t b, int64_t e) {
      for (int64_t li = b; li < e; ++li) {
        // enumerate lines along `axis`
        int64_t rem = li;
        const int64_t c = rem / (d * h * w / len);
        rem %= (d * h * w / len);
        int64_t base = c * d * h * w;
        if (axis == 0) {
          base += (rem / w) * w + (rem % w);
        } else if (axis == 1) {
          base += (rem / w) * h * w + (rem % w);
        } else {
          base += rem * w;
        }
        for (int64_t i = 0; i < len; ++i) {
          double acc = 0;
          for (int64_t t = -r; t <= r; ++t) {
            const int64_t j = std::clamp<int64_t>(i + t, 0, len - 1);
            acc += double(kern[size_t(t + r)]) * double(src[base + j * stride]);
          }
          dst[base + i * stride] = float(acc);
        }
      }
    });
  };
  pass(field, tmp, 2);
  pass(tmp, field, 1);
  pass(field, tmp, 0);
  field = std::move(tmp);
}

}  // namespace

double min_jacobian_determinant(const Tensor<float>& dvf) {
  const Shape& s = dvf.shape();
  const int64_t d = s[1], h = s[2], w = s[3];
  const int64_t sp = d * h * w;
  const float* f = dvf.data();
  double best = std::numeric_limits<double>::infinity();
  for (int64_t z = 1; z < d - 1; ++z)
    for (int64_t y = 1; y < h - 1; ++y)
      for (int64_t x = 1; x < w - 1; ++x) {
        const int64_t i = (z * h + y) * w + x;
        double j[3][3];
        const int64_t st[3] = {h * w, w, 1};
        for (int c = 0; c < 3; ++c)
          for (int a = 0; a < 3; ++a)
            j[c][a] = 0.5 * (double(f[c * sp + i + st[a]]) - double(f[c * sp + i - st[a]])) +
                      (c == a ? 1.0 : 0.0);
        const double det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) -
                           j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0]) +
                           j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
        best = std::min(best, det);
      }
  return best;
}

Tensor<float> generate_deformation(int64_t size, double magnitude, double smoothness,
                                   uint64_t seed) {
  if (magnitude < 0) throw ConfigError("deformation magnitude must be nonnegative");
  const int64_t n = size;
  if (magnitude == 0.0) return Tensor<float>({3, n, n, n});
  Rng rng(seed ^ 0x5eed5eedull);
  for (int attempt = 0; attempt < 20; ++attempt) {
    Tensor<float> field = Tensor<float>::uninit({3, n, n, n});
    for (int64_t i = 0; i < field.numel(); ++i) field[i] = float(rng.normal());
    gaussian_blur3(field, smoothness);
    // rescale to the requested max displacement magnitude
    const int64_t sp = n * n * n;
    double maxmag = 0;
    for (int64_t v = 0; v < sp; ++v) {
      const double m = double(field[v]) * double(field[v]) +
                       double(field[sp + v]) * double(field[sp + v]) +
                       double(field[2 * sp + v]) * double(field[2 * sp + v]);
      maxmag = std::max(maxmag, m);
    }
    if (maxmag <= 0) continue;
    const float scale = float(magnitude / std::sqrt(maxmag));
    for (int64_t i = 0; i < field.numel(); ++i) field[i] *= scale;
    if (min_jacobian_determinant(field) > 0.05) return field;
  }
  throw GenerationError("could not draw an invertible deformation; reduce magnitude/smoothness");
}

PhantomPair make_pair(const PhantomSpec& spec, uint64_t seed) {
  spec.validate();
  Rng rng(seed ^ 0x9a17b0d5ull);
  Phantom moving = generate_phantom(spec, seed);

  PhantomPair pair;
  pair.seed = seed;
  pair.moving = moving.volume;
  pair.moving_seg = moving.labels;

  if (spec.independent_pair) {
    Phantom fixed = generate_phantom(spec, seed ^ 0xf1e2d3c4ull);
    pair.fixed = fixed.volume;
    pair.fixed_seg = fixed.labels;
    pair.dvf_star = Tensor<float>({3, spec.size, spec.size, spec.size});
    return pair;
  }

  const double magnitude = rng.uniform(spec.deform_magnitude_lo, spec.deform_magnitude_hi);
  Tensor<float> dvf =
      generate_deformation(spec.size, magnitude, spec.deform_smoothness, rng.next_u64());

  // organ-level motion: a smooth directional bump at each organ centroid,
  // plus a radial push at the bladder (its volume varies the most between
  // visits). Backed off geometrically until the deformation stays invertible.
  const int64_t n = spec.size, sp = n * n * n;
  struct Bump {
    double cz, cy, cx, sigma;
    double dir[3];
    double mag;
    bool radial;
  };
  std::vector<Bump> bumps;
  for (int lab = 1; lab <= 4; ++lab) {
    double cz = 0, cy = 0, cx = 0;
    int64_t cnt = 0;
    for (int64_t z = 0; z < n; ++z)
      for (int64_t y = 0; y < n; ++y)
        for (int64_t x = 0; x < n; ++x)
          if (pair.moving_seg[(z * n + y) * n + x] == lab) {
            cz += double(z);
            cy += double(y);
            cx += double(x);
            ++cnt;
          }
    if (cnt == 0) continue;
    cz /= double(cnt);
    cy /= double(cnt);
    cx /= double(cnt);
    const double rad = std::cbrt(3.0 * double(cnt) / (4.0 * 3.14159265358979));
    const double hi = spec.organ_shift[size_t(lab - 1)];
    if (hi > 0) {
      Bump b;
      b.cz = cz;
      b.cy = cy;
      b.cx = cx;
      b.sigma = rad * 1.5;
      double dz = rng.normal(), dy = rng.normal(), dx = rng.normal();
      const double len = std::sqrt(dz * dz + dy * dy + dx * dx) + 1e-12;
      b.dir[0] = dz / len;
      b.dir[1] = dy / len;
      b.dir[2] = dx / len;
      b.mag = rng.uniform(0.5 * hi, hi);
      b.radial = false;
      bumps.push_back(b);
    }
    if (lab == 1 && spec.bladder_extra > 0) {
      Bump b;
      b.cz = cz;
      b.cy = cy;
      b.cx = cx;
      b.sigma = rad * 1.6;
      b.dir[0] = b.dir[1] = b.dir[2] = 0;
      b.mag = rng.uniform(0.5, spec.bladder_extra);
      b.radial = true;
      bumps.push_back(b);
    }
  }
  for (int bump_try = 0; bump_try < 8 && !bumps.empty(); ++bump_try) {
    const double scale = std::pow(0.7, bump_try);
    Tensor<float> cand = dvf;
    for (const Bump& b : bumps) {
      for (int64_t z = 0; z < n; ++z)
        for (int64_t y = 0; y < n; ++y)
          for (int64_t x = 0; x < n; ++x) {
            const double dz = double(z) - b.cz, dy = double(y) - b.cy, dx = double(x) - b.cx;
            const double r2 = dz * dz + dy * dy + dx * dx;
            const double g = scale * b.mag * std::exp(-0.5 * r2 / (b.sigma * b.sigma));
            const int64_t i = (z * n + y) * n + x;
            if (b.radial) {
              const double r = std::sqrt(r2) + 1e-9;
              cand[i] += float(g * dz / r);
              cand[sp + i] += float(g * dy / r);
              cand[2 * sp + i] += float(g * dx / r);
            } else {
              cand[i] += float(g * b.dir[0]);
              cand[sp + i] += float(g * b.dir[1]);
              cand[2 * sp + i] += float(g * b.dir[2]);
            }
          }
    }
    if (min_jacobian_determinant(cand) > 0.05) {
      dvf = std::move(cand);
      break;
    }
  }
  pair.dvf_star = std::move(dvf);

  // fixed = warp(moving) + fresh noise
  Tensor<float> mov5 = pair.moving.reshaped({1, 1, n, n, n});
  Tensor<float> dvf5 = pair.dvf_star.reshaped({1, 3, n, n, n});
  Tensor<float> warped = warp_trilinear(mov5, dvf5);
  pair.fixed = Tensor<float>::uninit({n, n, n});
  for (int64_t i = 0; i < pair.fixed.numel(); ++i) {
    const double v = double(warped[i]) + rng.normal(0.0, spec.noise_sigma);
    pair.fixed[i] = float(std::clamp(v, 0.0, 1.0));
  }
  Tensor<uint8_t> seg4 = pair.moving_seg.reshaped({1, n, n, n});
  pair.fixed_seg = warp_labels(seg4, dvf5).reshaped({n, n, n});
  return pair;
}

PatchSample sample_patch_in_stratum(const Tensor<uint8_t>& seg, int64_t n_patch, int stratum,
                                    Rng& rng) {
  const Shape& s = seg.shape();
  auto in_stratum = [&](uint8_t lab) {
    if (stratum == 0) return lab == 2 || lab == 3;  // targets
    if (stratum == 1) return lab == 1 || lab == 4;  // organs-at-risk
    return lab == 0;
  };
  // count, then pick the k-th matching voxel
  int64_t count = 0;
  for (int64_t i = 0; i < seg.numel(); ++i) count += in_stratum(seg[i]);
  int tried = stratum;
  while (count == 0) {
    // stratum empty: fall through to the next one with a warning
    std::fprintf(stderr, "[xs] sample_patches: stratum %d empty, resampling from next\n",
                 tried);
    tried = (tried + 1) % 3;
    if (tried == stratum) throw GenerationError("all sampling strata empty");
    count = 0;
    for (int64_t i = 0; i < seg.numel(); ++i) {
      const uint8_t lab = seg[i];
      const bool m = (tried == 0)   ? (lab == 2 || lab == 3)
                     : (tried == 1) ? (lab == 1 || lab == 4)
                                    : (lab == 0);
      count += m;
    }
    stratum = tried;
  }
  int64_t k = int64_t(rng.uniform_index(uint64_t(count)));
  int64_t center = -1;
  for (int64_t i = 0; i < seg.numel(); ++i) {
    if (in_stratum(seg[i]) && k-- == 0) {
      center = i;
      break;
    }
  }
  const int64_t cz = center / (s[1] * s[2]);
  const int64_t cy = (center / s[2]) % s[1];
  const int64_t cx = center % s[2];
  if (n_patch > s[0] || n_patch > s[1] || n_patch > s[2])
    throw DimError("sample_patch: patch size exceeds volume");
  PatchSample p;
  p.stratum = stratum;
  const int64_t half = n_patch / 2;
  p.start = {std::clamp<int64_t>(cz - half, 0, s[0] - n_patch),
             std::clamp<int64_t>(cy - half, 0, s[1] - n_patch),
             std::clamp<int64_t>(cx - half, 0, s[2] - n_patch)};
  return p;
}

std::vector<PatchSample> sample_patches(const PhantomPair& pair, int64_t n_patch, int64_t count,
                                        uint64_t seed) {
  if (n_patch > pair.fixed.extent(0) || n_patch > pair.fixed.extent(1) ||
      n_patch > pair.fixed.extent(2))
    throw DimError("patch size exceeds volume size");
  Rng rng(seed ^ 0x7a7c4e11ull);
  std::vector<PatchSample> out;
  out.reserve(size_t(count));
  for (int64_t i = 0; i < count; ++i) {
    out.push_back(sample_patch_in_stratum(pair.fixed_seg, n_patch, int(i % 3), rng));
  }
  return out;
}

}  // namespace xs

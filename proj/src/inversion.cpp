#include "tilens/inversion.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <map>
#include <optional>

#include "tilens/parallel.hpp"
#include "tilens/raytrace.hpp"

namespace tilens {

namespace {

constexpr double kDegree = 3.14159265358979323846 / 180.0;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// RecoveryGrid
// ---------------------------------------------------------------------------

Vec3 RecoveryGrid::voxel_size() const {
  return Vec3(box.extent()(0) / n1, box.extent()(1) / n2,
              box.extent()(2) / n3);
}

long RecoveryGrid::flat(int i, int j, int k) const {
  return (static_cast<long>(k) * n2 + j) * n1 + i;
}

Vec3 RecoveryGrid::center(long v) const {
  const int i = static_cast<int>(v % n1);
  const int j = static_cast<int>((v / n1) % n2);
  const int k = static_cast<int>(v / (static_cast<long>(n1) * n2));
  const Vec3 h = voxel_size();
  return box.lo + Vec3((i + 0.5) * h(0), (j + 0.5) * h(1), (k + 0.5) * h(2));
}

long RecoveryGrid::index_of(const Vec3& x) const {
  if (!box.contains(x)) return -1;
  const Vec3 h = voxel_size();
  const int i = std::min(static_cast<int>((x(0) - box.lo(0)) / h(0)), n1 - 1);
  const int j = std::min(static_cast<int>((x(1) - box.lo(1)) / h(1)), n2 - 1);
  const int k = std::min(static_cast<int>((x(2) - box.lo(2)) / h(2)), n3 - 1);
  return flat(i, j, k);
}

void RecoveryGrid::validate() const {
  if (n1 < 1 || n2 < 1 || n3 < 1)
    throw ConfigError("recovery grid dims must be positive");
  if (!((box.hi - box.lo).array() > 0).all())
    throw ConfigError("recovery grid box is empty");
}

// ---------------------------------------------------------------------------
// Fan construction
// ---------------------------------------------------------------------------

namespace {

// Symmetric angle ladder: n values spread over [-max_deg, max_deg], the
// midpoint included for odd n.
std::vector<double> angle_ladder(int n, double max_deg) {
  std::vector<double> out;
  if (n <= 1) {
    out.push_back(0.0);
    return out;
  }
  for (int i = 0; i < n; ++i)
    out.push_back((-1.0 + 2.0 * i / (n - 1)) * max_deg * kDegree);
  return out;
}

}  // namespace

std::vector<PhasePoint> diving_fan(const Box& domain, const RecoveryGrid& grid,
                                   const FanOptions& opt) {
  grid.validate();
  if (opt.heights < 1 || opt.offsets < 1)
    throw ConfigError("fan needs at least one height and one offset");

  const auto tilts = angle_ladder(opt.tilts, opt.tilt_max_deg);
  const auto dips = angle_ladder(opt.dips, opt.dip_max_deg);

  std::vector<PhasePoint> fan;
  const int n_axes = opt.both_axes ? 2 : 1;
  for (int axis = 0; axis < n_axes; ++axis) {
    const int perp = 1 - axis;
    for (int ih = 0; ih < opt.heights; ++ih) {
      const double z = grid.box.lo(2) + (ih + 0.5) / opt.heights *
                                            (grid.box.hi(2) - grid.box.lo(2));
      for (int io = 0; io < opt.offsets; ++io) {
        const double o = grid.box.lo(perp) + (io + 0.5) / opt.offsets *
                                                 (grid.box.hi(perp) -
                                                  grid.box.lo(perp));
        for (double ta : tilts) {
          for (double td : dips) {
            Vec3 x = Vec3::Zero(), xi = Vec3::Zero();
            x(axis) = domain.lo(axis) + opt.face_inset;
            x(perp) = o;
            x(2) = z;
            xi(axis) = std::cos(td) * std::cos(ta);
            xi(perp) = std::cos(td) * std::sin(ta);
            xi(2) = std::sin(td);
            fan.push_back({x, xi});
          }
        }
      }
    }
  }
  return fan;
}

// ---------------------------------------------------------------------------
// Data synthesis
// ---------------------------------------------------------------------------

SynthesizedData synthesize_data(const ScenarioPair& pair,
                                const std::vector<WaveMode>& waves,
                                const std::vector<PhasePoint>& fan,
                                const TraceOptions& opt) {
  if (waves.empty()) throw ConfigError("synthesize_data: no waves requested");
  const auto stops = box_surfaces(pair.reference.domain());

  SynthesizedData out;
  for (WaveMode w : waves) {
    WaveMismatch wm;
    wm.wave = w;
    std::vector<std::optional<RayMismatch>> slot(fan.size());
    std::vector<std::optional<FailedRay>> fail(fan.size());
    parallel_for(static_cast<long>(fan.size()), [&](long i) {
      try {
        // Fan covectors are group-direction aims: resolve the covector whose
        // ray actually travels that way in this wave, then scale to p = 1.
        // Entries sit where the media agree, so the reference-side
        // conversion is also the truth-side one.
        const PhasePoint& aim = fan[static_cast<size_t>(i)];
        const Vec3 xi = invert_hamilton_map(pair.reference, w, aim.x, aim.xi);
        const PhasePoint start =
            normalize_entry(pair.reference, w, {aim.x, xi});
        const auto ray = integrate_flow(pair.truth, w, start, stops, opt);
        const auto ray_t = integrate_flow(pair.reference, w, start, stops, opt);
        if (!ray.exited || !ray_t.exited)
          throw MaxTimeExceededError("ray did not exit the domain");
        if (ray.exit_surface != ray_t.exit_surface)
          throw TangencyError("media disagree on the exit face: " +
                              ray.exit_surface + " vs " + ray_t.exit_surface);
        RayMismatch rm;
        rm.fan_index = static_cast<size_t>(i);
        rm.entry = start;
        rm.dxi = ray.at(ray.tau).xi - ray_t.at(ray_t.tau).xi;
        rm.tau = ray.tau;
        rm.tau_tilde = ray_t.tau;
        const double scale =
            std::max(ray.at(ray.tau).xi.norm(), ray_t.at(ray_t.tau).xi.norm());
        rm.noise = (ray.conservation_residual + ray_t.conservation_residual) *
                       scale +
                   1e-14;
        slot[static_cast<size_t>(i)] = rm;
      } catch (const Error& e) {
        fail[static_cast<size_t>(i)] = FailedRay{static_cast<size_t>(i),
                                                 e.what()};
      }
    });
    for (size_t i = 0; i < fan.size(); ++i) {
      if (slot[i]) wm.rays.push_back(*slot[i]);
      if (fail[i]) wm.failed.push_back(*fail[i]);
    }
    out.waves.push_back(std::move(wm));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

namespace {

// Per-ray accumulation of the reduced-transform quadrature into voxel bins,
// one bin vector per weight channel.
struct RayRows {
  bool ok = false;
  std::string note;
  double apex = 0;                       // deepest foliation value reached
  PhasePoint apex_pt;                    // phase point at the deepest node
  std::vector<Eigen::VectorXd> channel;  // per channel, size = grid.size()
};

// Weight channels: one per active parameter, or the summed functional
// combination.  `e` is the segment-weight vector over (E2, a11, a33).
using ChannelWeights = std::function<void(const Vec3& e, double* out)>;

RayRows build_ray_rows(const MaterialField& ref, WaveMode wave,
                       const PhasePoint& entry, const RecoveryGrid& grid,
                       const ScalarField& fol, int n_channels,
                       const ChannelWeights& weights,
                       const std::vector<StopSurface>& stops,
                       const AssembleOptions& opt) {
  RayRows rr;
  rr.channel.assign(n_channels, Eigen::VectorXd::Zero(grid.size()));
  Bicharacteristic ray;
  try {
    ray = integrate_flow(ref, wave, entry, stops, opt.pseudolin.trace);
  } catch (const Error& e) {
    rr.note = std::string("reference trace failed: ") + e.what();
    return rr;
  }
  if (!ray.exited) {
    rr.note = "reference ray did not exit";
    return rr;
  }

  const auto nodes = transform_nodes(ref, ref, wave, ray, opt.pseudolin);

  rr.apex = fol.value(ray.at(0).x);
  double apex_t = 0;
  long in_grid = 0;
  bool tangent_seen = false;
  std::vector<double> wbuf(n_channels);
  for (size_t k = 0; k < nodes.t.size(); ++k) {
    const double x_fol = fol.value(nodes.x[k]);
    if (x_fol < rr.apex) {
      rr.apex = x_fol;
      apex_t = nodes.t[k];
    }
    const long v = grid.index_of(nodes.x[k]);
    if (v < 0) continue;
    ++in_grid;
    // chi-support admission: the ray must pass the grid near-tangentially
    // somewhere, in the normalized tilt variable lambda / (x |omega|).
    if (!tangent_seen) {
      const PhasePoint q = ray.at(nodes.t[k]);
      const Vec3 vel = hamiltonian_derivs(ref, wave, q).dp_dxi;
      const Vec3 gf = fol.gradient(nodes.x[k]);
      const double lam = gf.dot(vel);
      const Vec3 vtan = vel - lam * gf / std::max(gf.squaredNorm(), 1e-30);
      const double lhat =
          lam / (std::max(x_fol, 1e-6) * std::max(vtan.norm(), 1e-30));
      if (std::abs(lhat) <= opt.cutoff.lambda_max) tangent_seen = true;
    }
    weights(nodes.e[k], wbuf.data());
    const double base = -nodes.dt[k] * nodes.flow_diag[k];
    for (int c = 0; c < n_channels; ++c)
      rr.channel[c](v) += base * wbuf[c];
  }

  if (in_grid == 0) {
    rr.note = "EmptyRowWarning: ray never enters the recovery grid";
    return rr;
  }
  if (rr.apex < opt.min_apex) {
    rr.note = "ray dives to foliation depth " + fmt(rr.apex) +
              ", below the admissible floor " + fmt(opt.min_apex);
    return rr;
  }
  if (!tangent_seen) {
    rr.note = "no near-tangent node inside the grid (|lambda-hat| > " +
              fmt(opt.cutoff.lambda_max) + ")";
    return rr;
  }
  rr.apex_pt = ray.at(apex_t);
  rr.ok = true;
  return rr;
}

// Raw (unconjugated) row block prior to weighting: channel values per voxel,
// the right-hand side entry, its noise estimate, and the apex depth.
struct PendingRow {
  std::vector<Eigen::VectorXd> block;  // one VectorXd per column block
  double rhs = 0;
  double noise = 0;
  double apex = 0;
  size_t fan_index = 0;
};

LinearSystem finish_system(std::vector<PendingRow> rows,
                           std::vector<std::string> warnings,
                           const std::vector<Param>& active,
                           const RecoveryGrid& grid, FieldPtr foliation,
                           int deriv_component, const AssembleOptions& opt) {
  const long nvox = grid.size();
  const long ncols = nvox * static_cast<long>(active.size());
  const long nrows = static_cast<long>(rows.size());
  if (nrows < ncols)
    throw ConfigError("assembled " + std::to_string(nrows) +
                      " usable rows for " + std::to_string(ncols) +
                      " unknowns; enlarge the fan or coarsen the grid");

  // Depth normalization: the conjugation exponent uses the foliation value
  // in units of the grid's shallowest voxel depth, clamped from below so the
  // exponentials stay representable.
  double x_top = 0;
  for (long v = 0; v < nvox; ++v)
    x_top = std::max(x_top, foliation->value(grid.center(v)));
  if (x_top <= 0)
    throw ConfigError("recovery grid lies below the artificial boundary");
  const auto depth_exp = [&](double x_fol, double sign) {
    const double xn = std::max(x_fol / x_top, opt.depth_floor);
    return std::exp(sign * opt.digamma / xn);
  };

  LinearSystem sys;
  sys.active = active;
  sys.grid = grid;
  sys.foliation = foliation;
  sys.digamma = opt.digamma;
  sys.deriv_component = deriv_component;
  sys.warnings = std::move(warnings);
  sys.a.resize(nrows, ncols);
  sys.rhs.resize(nrows);
  sys.row_weight.resize(nrows);
  sys.col_scale.resize(ncols);
  sys.regularizer = Eigen::VectorXd::Ones(ncols);
  sys.row_fan_index.reserve(rows.size());

  Eigen::VectorXd dvox(nvox);
  for (long v = 0; v < nvox; ++v)
    dvox(v) = depth_exp(foliation->value(grid.center(v)), +1.0);

  double noise_sq = 0;
  for (long r = 0; r < nrows; ++r) {
    const PendingRow& pr = rows[static_cast<size_t>(r)];
    const double w = depth_exp(pr.apex, -1.0);
    sys.row_weight(r) = w;
    sys.rhs(r) = w * pr.rhs;
    for (size_t b = 0; b < active.size(); ++b)
      sys.a.row(r).segment(static_cast<long>(b) * nvox, nvox) =
          (w * pr.block[b].array() * dvox.array()).matrix().transpose();
    noise_sq += w * w * pr.noise * pr.noise;
    sys.row_fan_index.push_back(pr.fan_index);
  }
  sys.noise_floor = std::sqrt(noise_sq);

  // Per-block equilibration keeps the uniform Tikhonov penalty comparable
  // across parameters of different physical scale.
  for (size_t b = 0; b < active.size(); ++b) {
    double s = 1.0;
    if (opt.equilibrate) {
      std::vector<double> mags;
      const auto blk = sys.a.middleCols(static_cast<long>(b) * nvox, nvox);
      for (long r = 0; r < blk.rows(); ++r)
        for (long c = 0; c < blk.cols(); ++c)
          if (blk(r, c) != 0.0) mags.push_back(std::abs(blk(r, c)));
      if (!mags.empty()) {
        std::nth_element(mags.begin(), mags.begin() + mags.size() / 2,
                         mags.end());
        const double med = mags[mags.size() / 2];
        if (med > 0) s = 1.0 / med;
      }
    }
    sys.a.middleCols(static_cast<long>(b) * nvox, nvox) *= s;
    sys.col_scale.segment(static_cast<long>(b) * nvox, nvox) =
        (dvox.array() * s).matrix();
  }

  if (!sys.a.allFinite() || !sys.rhs.allFinite())
    throw NumericalError("assembled system contains non-finite entries");
  return sys;
}

std::map<size_t, const RayMismatch*> mismatch_index(const WaveMismatch& wm) {
  std::map<size_t, const RayMismatch*> m;
  for (const auto& r : wm.rays) m[r.fan_index] = &r;
  return m;
}

const WaveMismatch& wave_data(const SynthesizedData& data, WaveMode w) {
  for (const auto& wm : data.waves)
    if (wm.wave == w) return wm;
  throw ConfigError(std::string("synthesized data carries no ") +
                    wave_name(w) + " mismatches");
}

}  // namespace

LinearSystem assemble_system(const ScenarioPair& pair,
                             const std::vector<WaveMode>& waves,
                             const std::vector<PhasePoint>& fan,
                             const SynthesizedData& data,
                             const RecoveryGrid& grid, FieldPtr foliation,
                             const AssembleOptions& opt) {
  grid.validate();
  opt.cutoff.validate();
  if (waves.empty()) throw ConfigError("assemble_system: no waves");
  if (pair.active.empty() || pair.active.size() > 2)
    throw ConfigError("assemble_system handles one or two active parameters");
  const MaterialField& ref = pair.reference;
  const auto stops = box_surfaces(ref.domain());
  const int j = opt.pseudolin.deriv_component;
  const size_t np = pair.active.size();
  const auto weights = [&](const Vec3& e, double* out) {
    for (size_t b = 0; b < np; ++b)
      out[b] = e(static_cast<int>(pair.active[b]));
  };

  std::vector<PendingRow> rows;
  std::vector<std::string> warnings;

  if (np == 1) {
    // One row per (wave, matched ray).
    for (WaveMode w : waves) {
      const auto& wm = wave_data(data, w);
      std::vector<RayRows> rr(wm.rays.size());
      parallel_for(static_cast<long>(wm.rays.size()), [&](long i) {
        rr[static_cast<size_t>(i)] = build_ray_rows(
            ref, w, wm.rays[static_cast<size_t>(i)].entry, grid, *foliation, 1,
            weights, stops, opt);
      });
      for (size_t i = 0; i < wm.rays.size(); ++i) {
        if (!rr[i].ok) {
          warnings.push_back(std::string(wave_name(w)) + " ray " +
                             std::to_string(wm.rays[i].fan_index) + ": " +
                             rr[i].note);
          continue;
        }
        PendingRow pr;
        pr.block = {rr[i].channel[0]};
        pr.rhs = wm.rays[i].dxi(j);
        pr.noise = wm.rays[i].noise;
        pr.apex = rr[i].apex;
        pr.fan_index = wm.rays[i].fan_index;
        rows.push_back(std::move(pr));
      }
    }
  } else {
    // Two parameters: both waves are combined per entry, premultiplied by
    // the transpose of the 2x2 material sensitivity matrix at the ray
    // apexes so the implied symbol is S^T S.
    if (waves.size() != 2)
      throw ConfigError("two-parameter assembly needs exactly two waves");
    const auto& wm0 = wave_data(data, waves[0]);
    const auto& wm1 = wave_data(data, waves[1]);
    const auto idx1 = mismatch_index(wm1);
    std::vector<std::pair<const RayMismatch*, const RayMismatch*>> pairs;
    for (const auto& r0 : wm0.rays) {
      const auto it = idx1.find(r0.fan_index);
      if (it != idx1.end()) pairs.emplace_back(&r0, it->second);
    }
    std::vector<std::array<RayRows, 2>> rr(pairs.size());
    parallel_for(static_cast<long>(pairs.size()), [&](long i) {
      const auto& pp = pairs[static_cast<size_t>(i)];
      rr[static_cast<size_t>(i)][0] = build_ray_rows(
          ref, waves[0], pp.first->entry, grid, *foliation,
          static_cast<int>(np), weights, stops, opt);
      rr[static_cast<size_t>(i)][1] = build_ray_rows(
          ref, waves[1], pp.second->entry, grid, *foliation,
          static_cast<int>(np), weights, stops, opt);
    });
    for (size_t i = 0; i < pairs.size(); ++i) {
      if (!rr[i][0].ok || !rr[i][1].ok) {
        const auto& bad = rr[i][0].ok ? rr[i][1] : rr[i][0];
        warnings.push_back("entry " + std::to_string(pairs[i].first->fan_index) +
                           ": " + bad.note);
        continue;
      }
      // S(w, l) = dP_w / dmu_l at the wave's own apex covector.
      Eigen::Matrix2d s;
      for (int w = 0; w < 2; ++w) {
        const MaterialSens ms =
            material_sensitivities(ref, waves[w], rr[i][w].apex_pt);
        for (size_t l = 0; l < np; ++l)
          s(w, static_cast<int>(l)) = ms.get(pair.active[l]);
      }
      const RayMismatch* rm[2] = {pairs[i].first, pairs[i].second};
      for (size_t c = 0; c < np; ++c) {  // output component = parameter row
        PendingRow pr;
        pr.block.assign(np, Eigen::VectorXd::Zero(grid.size()));
        for (int w = 0; w < 2; ++w) {
          const double cw = s(w, static_cast<int>(c));
          for (size_t b = 0; b < np; ++b)
            pr.block[b] += cw * rr[i][w].channel[b];
          pr.rhs += cw * rm[w]->dxi(j);
          pr.noise += std::abs(cw) * rm[w]->noise;
        }
        pr.apex = std::min(rr[i][0].apex, rr[i][1].apex);
        pr.fan_index = rm[0]->fan_index;
        rows.push_back(std::move(pr));
      }
    }
  }

  return finish_system(std::move(rows), std::move(warnings), pair.active,
                       grid, foliation, j, opt);
}

LinearSystem assemble_functional(const ScenarioPair& pair,
                                 const std::vector<PhasePoint>& fan,
                                 const SynthesizedData& data,
                                 const RecoveryGrid& grid, FieldPtr foliation,
                                 const AssembleOptions& opt) {
  grid.validate();
  opt.cutoff.validate();
  if (!pair.functional)
    throw ConfigError("assemble_functional needs a functional scenario pair");
  const MaterialField& ref = pair.reference;
  const auto stops = box_surfaces(ref.domain());
  const int j = opt.pseudolin.deriv_component;
  // The H' channel is intentionally absent: its qP and qSV contributions
  // cancel at the boundary, and only the forward data knows about H.
  const double fp = pair.f_prime;
  const auto weights = [fp](const Vec3& e, double* out) {
    out[0] = e(static_cast<int>(Param::A11)) +
             fp * e(static_cast<int>(Param::A33));
  };

  const auto& wp = wave_data(data, WaveMode::QP);
  const auto& wv = wave_data(data, WaveMode::QSV);
  const auto idxv = mismatch_index(wv);
  std::vector<std::pair<const RayMismatch*, const RayMismatch*>> pairs;
  for (const auto& r0 : wp.rays) {
    const auto it = idxv.find(r0.fan_index);
    if (it != idxv.end()) pairs.emplace_back(&r0, it->second);
  }

  std::vector<std::array<RayRows, 2>> rr(pairs.size());
  parallel_for(static_cast<long>(pairs.size()), [&](long i) {
    const auto& pp = pairs[static_cast<size_t>(i)];
    rr[static_cast<size_t>(i)][0] =
        build_ray_rows(ref, WaveMode::QP, pp.first->entry, grid, *foliation, 1,
                       weights, stops, opt);
    rr[static_cast<size_t>(i)][1] =
        build_ray_rows(ref, WaveMode::QSV, pp.second->entry, grid, *foliation,
                       1, weights, stops, opt);
  });

  std::vector<PendingRow> rows;
  std::vector<std::string> warnings;
  for (size_t i = 0; i < pairs.size(); ++i) {
    if (!rr[i][0].ok || !rr[i][1].ok) {
      const auto& bad = rr[i][0].ok ? rr[i][1] : rr[i][0];
      warnings.push_back("entry " + std::to_string(pairs[i].first->fan_index) +
                         ": " + bad.note);
      continue;
    }
    PendingRow pr;
    pr.block = {rr[i][0].channel[0] + rr[i][1].channel[0]};
    pr.rhs = pairs[i].first->dxi(j) + pairs[i].second->dxi(j);
    pr.noise = pairs[i].first->noise + pairs[i].second->noise;
    pr.apex = std::min(rr[i][0].apex, rr[i][1].apex);
    pr.fan_index = pairs[i].first->fan_index;
    rows.push_back(std::move(pr));
  }

  return finish_system(std::move(rows), std::move(warnings), {Param::A11},
                       grid, foliation, j, opt);
}

double functional_sensitivity_sum(const ReducedParams& rp, double f_prime,
                                  double h_prime, double u, double v) {
  const MaterialSens sp = uv_sensitivities(rp, WaveMode::QP, u, v);
  const MaterialSens sv = uv_sensitivities(rp, WaveMode::QSV, u, v);
  return sp.da11 + f_prime * sp.da33 + h_prime * sp.de2 + sv.da11 +
         f_prime * sv.da33 + h_prime * sv.de2;
}

// ---------------------------------------------------------------------------
// Recovery
// ---------------------------------------------------------------------------

namespace {

// Conjugate gradient on (A^T A + mu^2 R^2) x = A^T b with N = A^T A formed
// once.  Records the data-space residual |A x - b| / |b| per iteration when
// asked.  Throws NoConvergenceError if the relative normal-equation residual
// fails to reach tol within the iteration budget.
Eigen::VectorXd cg_normal(const Eigen::MatrixXd& a, const Eigen::MatrixXd& n,
                          const Eigen::VectorXd& b, const Eigen::VectorXd& c,
                          const Eigen::VectorXd& reg2, double mu,
                          const RecoverOptions& opt, int& iters,
                          std::vector<double>* history) {
  const double mu2 = mu * mu;
  Eigen::VectorXd x = Eigen::VectorXd::Zero(a.cols());
  Eigen::VectorXd r = c;
  Eigen::VectorXd p = r;
  double rs = r.squaredNorm();
  const double stop = opt.cg_tol * std::max(c.norm(), 1e-300);
  const double bnorm = std::max(b.norm(), 1e-300);
  iters = 0;
  if (std::sqrt(rs) <= stop) return x;
  for (int it = 0; it < opt.max_iterations; ++it) {
    const Eigen::VectorXd q =
        n * p + mu2 * (reg2.array() * p.array()).matrix();
    const double alpha = rs / p.dot(q);
    x += alpha * p;
    r -= alpha * q;
    ++iters;
    if (history) history->push_back((a * x - b).norm() / bnorm);
    const double rs_new = r.squaredNorm();
    if (std::sqrt(rs_new) <= stop) return x;
    p = r + (rs_new / rs) * p;
    rs = rs_new;
  }
  throw NoConvergenceError(
      "conjugate gradient on the normal equations did not converge in " +
      std::to_string(opt.max_iterations) + " iterations");
}

}  // namespace

Recovery recover(const LinearSystem& sys, const ScenarioPair& pair,
                 const RecoverOptions& opt) {
  const long nvox = sys.grid.size();
  const long ncols = sys.a.cols();
  if (sys.a.rows() < ncols)
    throw ConfigError("linear system has fewer rows than columns");

  const Eigen::MatrixXd n = sys.a.transpose() * sys.a;
  const Eigen::VectorXd c = sys.a.transpose() * sys.rhs;
  const Eigen::VectorXd reg2 =
      (sys.regularizer.array() * sys.regularizer.array()).matrix();

  Recovery rec;
  rec.active = sys.active;
  rec.warnings = sys.warnings;

  // Discrepancy ladder: largest Tikhonov weight whose residual reaches the
  // noise-floor target; the target never drops below a fixed fraction of the
  // data norm (the quadrature and model error floor).
  Eigen::VectorXd g;
  if (opt.mu >= 0) {
    rec.mu = opt.mu;
    g = cg_normal(sys.a, n, sys.rhs, c, reg2, rec.mu, opt, rec.iterations,
                  nullptr);
  } else {
    const double mu0 = std::sqrt(n.trace() / ncols);
    const double target =
        std::max(opt.discrepancy_safety * sys.noise_floor,
                 opt.discrepancy_floor * sys.rhs.norm());
    bool hit = false;
    double prev_res = -1;
    for (int k = 0; k < opt.ladder_steps; ++k) {
      const double mu = mu0 * std::pow(opt.ladder_factor, k);
      int iters = 0;
      const Eigen::VectorXd gk =
          cg_normal(sys.a, n, sys.rhs, c, reg2, mu, opt, iters, nullptr);
      const double res = (sys.a * gk - sys.rhs).norm();
      if (res <= target) {
        rec.mu = mu;
        g = gk;
        hit = true;
        break;
      }
      // Residual plateau: the ladder has reached the discretization floor;
      // keep the previous (more regularized) weight rather than descending
      // into an unconstrained fit.
      if (prev_res > 0 && res > opt.plateau_ratio * prev_res) {
        hit = true;
        rec.warnings.push_back(
            "discrepancy target unreachable; stopped at the residual "
            "plateau");
        break;
      }
      rec.mu = mu;
      g = gk;
      prev_res = res;
    }
    if (!hit)
      rec.warnings.push_back(
          "discrepancy target not reached on the Tikhonov ladder; using the "
          "smallest weight");
  }
  // Re-run the chosen weight recording the residual history.
  g = cg_normal(sys.a, n, sys.rhs, c, reg2, rec.mu, opt, rec.iterations,
                &rec.residual_history);
  rec.data_residual =
      (sys.a * g - sys.rhs).norm() / std::max(sys.rhs.norm(), 1e-300);

  // Undo the conjugation and equilibration, then integrate the derivative
  // down from the shallow face (where the difference vanishes).
  const Vec3 h = sys.grid.voxel_size();
  const int dj = sys.deriv_component;
  for (size_t b = 0; b < sys.active.size(); ++b) {
    Eigen::VectorXd deriv =
        (g.segment(static_cast<long>(b) * nvox, nvox).array() *
         sys.col_scale.segment(static_cast<long>(b) * nvox, nvox).array())
            .matrix();
    Eigen::VectorXd est = Eigen::VectorXd::Zero(nvox);
    if (dj != 2)
      throw ConfigError(
          "depth integration expects the vertical derivative component");
    for (int i = 0; i < sys.grid.n1; ++i)
      for (int jj = 0; jj < sys.grid.n2; ++jj) {
        double acc = 0;  // integral of deriv from the top face down
        for (int k = sys.grid.n3 - 1; k >= 0; --k) {
          const long v = sys.grid.flat(i, jj, k);
          est(v) = -(acc + 0.5 * h(2) * deriv(v));
          acc += h(2) * deriv(v);
        }
      }
    Eigen::VectorXd truth(nvox);
    for (long v = 0; v < nvox; ++v)
      truth(v) = param_diff(pair.truth, pair.reference,
                            sys.grid.center(v))(
          static_cast<int>(sys.active[b]));
    rec.deriv.push_back(std::move(deriv));
    rec.estimate.push_back(std::move(est));
    rec.truth.push_back(std::move(truth));
  }

  // Scores: full grid and the near-boundary slab (deepest layers).
  const int near_k =
      std::max(1, static_cast<int>(std::floor(opt.near_fraction * sys.grid.n3)));
  rec.worst_rel_l2_near = 0;
  for (size_t b = 0; b < sys.active.size(); ++b) {
    double e_full = 0, t_full = 0, e_near = 0, t_near = 0;
    for (long v = 0; v < nvox; ++v) {
      const double d = rec.estimate[b](v) - rec.truth[b](v);
      const double t = rec.truth[b](v);
      e_full += d * d;
      t_full += t * t;
      const int k = static_cast<int>(v / (static_cast<long>(sys.grid.n1) *
                                          sys.grid.n2));
      if (k < near_k) {
        e_near += d * d;
        t_near += t * t;
      }
    }
    rec.rel_l2_full.push_back(std::sqrt(e_full / std::max(t_full, 1e-24)));
    rec.rel_l2_near.push_back(std::sqrt(e_near / std::max(t_near, 1e-24)));
    rec.worst_rel_l2_near = std::max(rec.worst_rel_l2_near,
                                     rec.rel_l2_near.back());
  }

  // Structure tensor of the error field vs the predicted degenerate
  // direction (the scattering image of the TI axis at the grid center).
  Mat3 tensor = Mat3::Zero();
  for (size_t b = 0; b < sys.active.size(); ++b) {
    for (int k = 1; k + 1 < sys.grid.n3; ++k)
      for (int jj = 1; jj + 1 < sys.grid.n2; ++jj)
        for (int i = 1; i + 1 < sys.grid.n1; ++i) {
          const auto err = [&](int a, int bb, int cc) {
            const long v = sys.grid.flat(a, bb, cc);
            return rec.estimate[b](v) - rec.truth[b](v);
          };
          Vec3 gvec((err(i + 1, jj, k) - err(i - 1, jj, k)) / (2 * h(0)),
                    (err(i, jj + 1, k) - err(i, jj - 1, k)) / (2 * h(1)),
                    (err(i, jj, k + 1) - err(i, jj, k - 1)) / (2 * h(2)));
          tensor += gvec * gvec.transpose();
        }
  }
  if (tensor.norm() > 0) {
    Eigen::SelfAdjointEigenSolver<Mat3> es(tensor);
    rec.error_principal_dir = es.eigenvectors().col(2);
  }
  const Vec3 zc = 0.5 * (sys.grid.box.lo + sys.grid.box.hi);
  const Vec3 axis = pair.reference.axis_at(zc);
  const Vec3 gf = sys.foliation->gradient(zc).normalized();
  const double xc = sys.foliation->value(zc);
  const Vec3 deg = xc * axis.dot(gf) * gf + (axis - axis.dot(gf) * gf);
  if (deg.norm() > 0) rec.degenerate_dir = deg.normalized();
  rec.error_axis_cos =
      std::abs(rec.error_principal_dir.dot(rec.degenerate_dir));

  return rec;
}

Recovery recover_functional(const ScenarioPair& pair,
                            const std::vector<PhasePoint>& fan,
                            const RecoveryGrid& grid, FieldPtr foliation,
                            const AssembleOptions& aopt,
                            const RecoverOptions& ropt) {
  const auto data = synthesize_data(pair, {WaveMode::QP, WaveMode::QSV}, fan,
                                    aopt.pseudolin.trace);
  const auto sys = assemble_functional(pair, fan, data, grid, foliation, aopt);
  return recover(sys, pair, ropt);
}

}  // namespace tilens

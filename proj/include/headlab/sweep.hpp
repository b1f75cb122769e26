#pragma once

// Cartesian (w, u) grid search of the perturbation scale against the
// interpolation strength for a fixed head set.

#include <cstddef>
#include <exception>
#include <string>
#include <vector>

#include "headlab/attention.hpp"
#include "headlab/dit.hpp"
#include "headlab/error.hpp"
#include "headlab/headhunter.hpp"
#include "headlab/objectives.hpp"
#include "headlab/parallel.hpp"
#include "headlab/sampler.hpp"

namespace headlab {

struct SweepConfig {
  std::vector<HeadId> heads;
  std::vector<double> w_grid{0, 1, 2, 4, 6};
  std::vector<double> u_grid{0, 0.25, 0.5, 0.75, 1};
  PerturbMethod method = PerturbMethod::soft_pag;
  double tau = 1.0;
  std::vector<PromptSeedPair> pairs = default_pairs();
  GuidanceConfig guidance;  // w_pert, cond and seed are replaced per cell
  ObjectiveId objective;
  std::size_t jobs = 1;

  void validate() const {
    if (w_grid.empty() || u_grid.empty()) throw DomainError("sweep grids must be non-empty");
    if (pairs.empty()) throw DomainError("at least one prompt-seed pair is required");
    for (double w : w_grid) {
      GuidanceConfig g = guidance;
      g.w_pert = w;
      g.validate();
    }
    for (double u : u_grid) PerturbSpec::of(heads, method, u, tau).validate();
  }
};

struct SweepCell {
  double w = 0.0;
  double u = 0.0;
  std::size_t pair = 0;
  ClassLabel cond;
  std::uint64_t seed = 0;
  double score = 0.0;
};

struct SweepResult {
  std::vector<double> w_grid;
  std::vector<double> u_grid;
  std::vector<SweepCell> cells;             // w-major, then u, then pair
  std::vector<std::vector<double>> matrix;  // [w][u], mean over pairs

  struct Best {
    std::size_t wi = 0;
    std::size_t ui = 0;
    double score = 0.0;
  };

  /// Highest mean; ties go to the earliest (w, u) in grid order.
  Best best() const {
    Best b{0, 0, matrix.at(0).at(0)};
    for (std::size_t i = 0; i < matrix.size(); ++i)
      for (std::size_t j = 0; j < matrix[i].size(); ++j)
        if (matrix[i][j] > b.score) b = {i, j, matrix[i][j]};
    return b;
  }
};

inline SweepResult run_sweep(const DitWeights& weights, const SweepConfig& cfg) {
  cfg.validate();
  const std::size_t nw = cfg.w_grid.size(), nu = cfg.u_grid.size(), np = cfg.pairs.size();
  SweepResult r;
  r.w_grid = cfg.w_grid;
  r.u_grid = cfg.u_grid;
  r.cells.resize(nw * nu * np);
  std::vector<std::exception_ptr> errors(r.cells.size());

  parallel_for(r.cells.size(), cfg.jobs, [&](std::size_t idx) {
    const std::size_t wi = idx / (nu * np), ui = (idx / np) % nu, pi = idx % np;
    SweepCell& cell = r.cells[idx];
    cell.w = cfg.w_grid[wi];
    cell.u = cfg.u_grid[ui];
    cell.pair = pi;
    cell.cond = cfg.pairs[pi].cond;
    cell.seed = cfg.pairs[pi].seed;
    try {
      GuidanceConfig g = cfg.guidance;
      g.w_pert = cell.w;
      g.cond = cell.cond;
      g.seed = cell.seed;
      const PerturbSpec spec = PerturbSpec::of(cfg.heads, cfg.method, cell.u, cfg.tau);
      cell.score = score(cfg.objective, sample(weights, g, spec).image, cell.cond);
    } catch (...) {
      errors[idx] = std::current_exception();
    }
  });
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  r.matrix.assign(nw, std::vector<double>(nu, 0.0));
  for (std::size_t wi = 0; wi < nw; ++wi)
    for (std::size_t ui = 0; ui < nu; ++ui) {
      double s = 0.0;
      for (std::size_t pi = 0; pi < np; ++pi) s += r.cells[(wi * nu + ui) * np + pi].score;
      r.matrix[wi][ui] = s / static_cast<double>(np);
    }
  return r;
}

}  // namespace headlab

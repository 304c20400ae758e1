#pragma once

#include <vector>

#include "zymflow/coevo.hpp"
#include "zymflow/so3.hpp"

namespace zymflow {

// A corrupted sample at time t: frames plus masking-state discrete variables,
// with the prior draws cached for loss targets. At t=0 every discrete state
// is mask; at t=1 the state equals the clean datum.
struct FlowState {
  double t = 0.0;
  std::vector<ResidueFrame> frames;  // frames_t; aa field unused here
  std::vector<int> aatypes;          // 0..19 or 20 (mask)
  int ec = 7;                        // 0..6 or 7 (mask)
  CoEvoMatrix coevo;                 // tokens 0..63 or 64 (mask)

  // Priors sampled at corruption time, kept as interpolation endpoints.
  std::vector<Vec3> x0;
  std::vector<Rotation> r0;

  std::vector<double> res_mask;   // valid residues
  std::vector<double> flow_mask;  // residues being generated

  int n_res() const { return static_cast<int>(frames.size()); }
};

// Optional self-conditioning inputs threaded into the node/edge features;
// zeros reproduce the unconditioned forward pass.
struct SelfConditioning {
  std::vector<Vec3> ca;                       // previous predicted CA, model units
  std::vector<std::vector<double>> aa_probs;  // per-residue, 20 wide
};

}  // namespace zymflow

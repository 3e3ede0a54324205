#pragma once

// Invariant suite behind `aios check`: gradient checks, matching oracle,
// Procrustes, attention masks, token layouts and GIoU/OKS properties. The
// individual suites take their sizes and tolerances as arguments so the
// acceptance binary can pin its own.

#include "aios/body_model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace aios {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

// |a - b| / max(|a|, |b|, floor).
double relative_error(double a, double b, double floor);

namespace checks {

// F1-normalized error against reference table rows (MVE 91.9 / F1 0.94 → 97.8, MVE 99.7 / F1 0.93 → 107.2).
CheckResult nmve_arithmetic(double tolerance);
// Random dyadic cost matrices up to max_size × max_size against exhaustive enumeration.
CheckResult hungarian_oracle(int trials, int max_size, std::uint64_t seed);

// Central finite differences; relative error with an absolute floor of 1e-6.
CheckResult body_gradients(const body::BodyModel& model, int points, double tolerance, std::uint64_t seed);
CheckResult projection_gradients(int points, double tolerance, std::uint64_t seed);
// Every training loss term in isolation (one weight non-zero), through the stage loss.
CheckResult loss_gradients(const body::BodyModel& model, int points, double tolerance, std::uint64_t seed);
// Whole network: parameter gradients of the total loss.
CheckResult network_gradients(const body::BodyModel& model, int entries, double tolerance, std::uint64_t seed);

// Similarity recovery, PA never worse than unaligned, PA-PVE similarity invariance.
CheckResult procrustes(const body::BodyModel& model, int trials, double recover_tolerance, double invariance_mm,
                       std::uint64_t seed);

// build_attention_mask against an independent rule oracle on random layouts.
CheckResult attention_masks(int layouts, int max_candidates, std::uint64_t seed);
// Layout sizes and candidate counts through full forward passes of random configs.
CheckResult token_layouts(const body::BodyModel& model, int configs, std::uint64_t seed);

CheckResult giou_oks_properties(int trials, std::uint64_t seed);

// Table invariants of the body model (validate()).
CheckResult body_tables(const body::BodyModel& model);
// Zero parameters reproduce the template mesh exactly.
CheckResult rest_pose(const body::BodyModel& model);

}  // namespace checks

// The full suite. With corrupt_skinning the body model's skinning weights are
// perturbed first (negative control; `aios check` enables it via AIOS_CHECK_CORRUPT=skinning).
std::vector<CheckResult> run_self_checks(bool corrupt_skinning);
std::string format_check_table(const std::vector<CheckResult>& results);

}  // namespace aios

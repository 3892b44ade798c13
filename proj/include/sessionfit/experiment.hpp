#pragma once

// Split planning (intra/inter), the vanilla -> FT1 -> FT2 incremental
// protocol, cross-validation over permuted plans, and accuracy statistics.
//
// Seed derivation is position-based so any phase can be reproduced in
// isolation (e.g. from a checkpoint):
//   phase_seed(run_seed, k)   k = 0 vanilla, k >= 1 fine-tune phase k
//   within a phase with base seed P:
//     splitmix64_at(P, 0) -> parameter initialization (vanilla only)
//     splitmix64_at(P, 1) -> epoch shuffling
// Cross-validation repeat r uses the child generator seeded config.seed ^ r
// to permute the plan, then draws the repeat's run seed from it.

#include <chrono>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "sessionfit/data.hpp"
#include "sessionfit/optim.hpp"

namespace sessionfit {

enum class SplitMode { intra_session, inter_session };

inline const char* split_mode_name(SplitMode mode) {
  return mode == SplitMode::intra_session ? "intra" : "inter";
}

// Which units (round ids in intra mode, session ids in inter mode) feed
// initial training, each fine-tuning phase, and evaluation.
struct SplitPlan {
  SplitMode mode = SplitMode::inter_session;
  std::vector<int> train_units;
  std::vector<std::vector<int>> ft_phases;
  int eval_unit = 0;
};

// Enforces pairwise disjointness of all roles; evaluation stays isolated.
inline void validate_plan(const SplitPlan& plan) {
  std::set<int> seen;
  auto add = [&](int unit) {
    if (unit < 1) throw std::invalid_argument("split plan: unit ids are 1-based");
    if (!seen.insert(unit).second)
      throw std::invalid_argument("split plan: unit " + std::to_string(unit) +
                                  " assigned to more than one role");
  };
  if (plan.train_units.empty()) throw std::invalid_argument("split plan: no training units");
  for (int u : plan.train_units) add(u);
  for (const auto& phase : plan.ft_phases) {
    if (phase.empty()) throw std::invalid_argument("split plan: empty fine-tune phase");
    for (int u : phase) add(u);
  }
  add(plan.eval_unit);
}

// Round-level plan over one session: train on rounds {1,2}, fine-tune on
// {3} then {4}, evaluate on round 5.
inline SplitPlan make_intra_plan(int rounds_available) {
  if (rounds_available != 5)
    throw std::invalid_argument("make_intra_plan: requires exactly 5 rounds, got " +
                                std::to_string(rounds_available));
  SplitPlan plan;
  plan.mode = SplitMode::intra_session;
  plan.train_units = {1, 2};
  plan.ft_phases = {{3}, {4}};
  plan.eval_unit = 5;
  validate_plan(plan);
  return plan;
}

// Session-level plan: train on sessions {1..4}, fine-tune on {5} then {6},
// evaluate on session 7.
inline SplitPlan make_inter_plan(int sessions_available) {
  if (sessions_available != 7)
    throw std::invalid_argument("make_inter_plan: requires exactly 7 sessions, got " +
                                std::to_string(sessions_available));
  SplitPlan plan;
  plan.mode = SplitMode::inter_session;
  plan.train_units = {1, 2, 3, 4};
  plan.ft_phases = {{5}, {6}};
  plan.eval_unit = 7;
  validate_plan(plan);
  return plan;
}

// Reassigns roles according to an explicit unit ordering: the first
// |train| entries become training units, then each fine-tune phase in
// order, then evaluation. Role sizes are preserved by construction.
inline SplitPlan apply_permutation(const SplitPlan& plan, const std::vector<int>& ordering) {
  std::size_t needed = plan.train_units.size() + 1;
  for (const auto& phase : plan.ft_phases) needed += phase.size();
  if (ordering.size() != needed)
    throw std::invalid_argument("apply_permutation: ordering has wrong length");
  SplitPlan out;
  out.mode = plan.mode;
  std::size_t pos = 0;
  out.train_units.assign(ordering.begin(), ordering.begin() + static_cast<std::ptrdiff_t>(plan.train_units.size()));
  pos = plan.train_units.size();
  for (const auto& phase : plan.ft_phases) {
    out.ft_phases.emplace_back(ordering.begin() + static_cast<std::ptrdiff_t>(pos),
                               ordering.begin() + static_cast<std::ptrdiff_t>(pos + phase.size()));
    pos += phase.size();
  }
  out.eval_unit = ordering[pos];
  validate_plan(out);
  return out;
}

// Uniformly random role reassignment, preserving role sizes.
inline SplitPlan permute_plan(const SplitPlan& plan, Prng& rng) {
  std::vector<int> units = plan.train_units;
  for (const auto& phase : plan.ft_phases) units.insert(units.end(), phase.begin(), phase.end());
  units.push_back(plan.eval_unit);
  rng.shuffle(units);
  return apply_permutation(plan, units);
}

// ---------------------------------------------------------------------------
// Reports

struct PhaseReport {
  std::string phase;
  std::vector<double> accuracies;
  std::vector<std::size_t> correct;
  std::vector<std::size_t> total;
  double mean = 0.0;
  double sample_std = 0.0;  // n-1 denominator
  bool std_defined = false; // false when only one repeat exists
};

inline PhaseReport aggregate_phase(std::string name, std::vector<double> accuracies,
                                   std::vector<std::size_t> correct,
                                   std::vector<std::size_t> total) {
  if (accuracies.empty()) throw std::invalid_argument("aggregate_phase: no accuracies");
  PhaseReport report;
  report.phase = std::move(name);
  report.accuracies = std::move(accuracies);
  report.correct = std::move(correct);
  report.total = std::move(total);
  double sum = 0.0;
  for (double a : report.accuracies) sum += a;
  const double n = static_cast<double>(report.accuracies.size());
  report.mean = sum / n;
  if (report.accuracies.size() > 1) {
    double ss = 0.0;
    for (double a : report.accuracies) ss += (a - report.mean) * (a - report.mean);
    report.sample_std = std::sqrt(ss / (n - 1.0));
    report.std_defined = true;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Configuration

struct ExperimentConfig {
  SplitMode mode = SplitMode::inter_session;
  int intra_session = 1;  // which session supplies rounds in intra mode
  int epochs_initial = 20;
  int epochs_per_ft = 10;
  float lr_initial = 1e-3f;
  float lr_ft = 1e-6f;
  int batch_size = 32;
  FreezeMode freeze_mode = FreezeMode::freeze_conv_sections;
  int cv_repeats = 5;
  bool cv_randomize = true;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(lr_ft < lr_initial))
      throw std::invalid_argument("experiment: lr_finetune must be < lr_initial");
    if (cv_repeats < 1) throw std::invalid_argument("experiment: cv_repeats must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("experiment: batch_size must be >= 1");
    if (epochs_initial < 0 || epochs_per_ft < 0)
      throw std::invalid_argument("experiment: epoch counts must be >= 0");
    if (intra_session < 1) throw std::invalid_argument("experiment: intra_session is 1-based");
  }
};

inline const char* freeze_mode_name(FreezeMode mode) {
  switch (mode) {
    case FreezeMode::none: return "none";
    case FreezeMode::freeze_conv_sections: return "conv";
    case FreezeMode::freeze_all_but_last: return "all-but-last";
  }
  return "?";
}

inline nlohmann::json experiment_config_json(const ExperimentConfig& c) {
  return nlohmann::json{{"mode", split_mode_name(c.mode)},
                        {"intra_session", c.intra_session},
                        {"epochs_initial", c.epochs_initial},
                        {"epochs_finetune", c.epochs_per_ft},
                        {"lr_initial", c.lr_initial},
                        {"lr_finetune", c.lr_ft},
                        {"batch_size", c.batch_size},
                        {"freeze", freeze_mode_name(c.freeze_mode)},
                        {"cv_repeats", c.cv_repeats},
                        {"cv_randomize", c.cv_randomize},
                        {"seed", c.seed}};
}

// ---------------------------------------------------------------------------
// Evaluation and unit collection

struct EvalResult {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const {
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
  }
};

inline EvalResult evaluate_accuracy(const NetworkSpec& spec, const ParameterSet& params,
                                    const std::vector<Sample>& samples, int batch_size) {
  if (batch_size < 1) throw std::invalid_argument("evaluate_accuracy: batch_size must be >= 1");
  EvalResult result;
  std::vector<int> labels;
  for (std::size_t begin = 0; begin < samples.size();
       begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end =
        std::min(samples.size(), begin + static_cast<std::size_t>(batch_size));
    Tensor batch = stack_batch(samples, begin, end, labels);
    ForwardResult fwd = forward(spec, params, batch, /*training=*/false);
    const std::vector<std::size_t> pred = argmax_last_axis(fwd.logits);
    for (std::size_t i = 0; i < pred.size(); ++i)
      if (pred[i] == static_cast<std::size_t>(labels[i])) ++result.correct;
    result.total += end - begin;
  }
  return result;
}

// Gathers borrowed samples for the given unit ids: rounds of the configured
// session in intra mode, whole sessions in inter mode.
inline std::vector<Sample> collect_unit_samples(const SessionCorpus& corpus, SplitMode mode,
                                                int intra_session,
                                                const std::vector<int>& units) {
  std::vector<Sample> samples;
  auto add_round = [&](const Round& round) {
    for (const LabeledImage& img : round) samples.push_back({&img.pixels, img.label});
  };
  if (mode == SplitMode::intra_session) {
    if (intra_session < 1 || static_cast<std::size_t>(intra_session) > corpus.sessions.size())
      throw std::invalid_argument("corpus has no session " + std::to_string(intra_session));
    const Session& session = corpus.sessions[static_cast<std::size_t>(intra_session - 1)];
    for (int u : units) {
      if (u < 1 || static_cast<std::size_t>(u) > session.size())
        throw std::invalid_argument("session " + std::to_string(intra_session) +
                                    " has no round " + std::to_string(u));
      add_round(session[static_cast<std::size_t>(u - 1)]);
    }
  } else {
    for (int u : units) {
      if (u < 1 || static_cast<std::size_t>(u) > corpus.sessions.size())
        throw std::invalid_argument("corpus has no session " + std::to_string(u));
      for (const Round& round : corpus.sessions[static_cast<std::size_t>(u - 1)])
        add_round(round);
    }
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Protocol

inline std::uint64_t phase_seed(std::uint64_t run_seed, int phase_index) {
  return splitmix64_at(run_seed, static_cast<std::uint64_t>(phase_index));
}

struct PhaseOutcome {
  std::string phase;
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy = 0.0;
  std::vector<double> loss_trace;
  ParameterSet params_after;  // filled when capture_params was requested
};

struct ProtocolResult {
  std::vector<PhaseOutcome> phases;
};

// Runs vanilla training followed by the incremental fine-tuning phases.
// Every phase starts from the previous phase's parameters with a fresh
// optimizer; evaluation is the fraction of eval-unit images whose argmax
// logit equals the label.
inline ProtocolResult run_protocol(const ExperimentConfig& config, const SessionCorpus& corpus,
                                   const SplitPlan& plan, std::uint64_t run_seed,
                                   bool capture_params = false) {
  config.validate();
  validate_plan(plan);
  if (plan.mode != config.mode)
    throw std::invalid_argument("run_protocol: plan/config mode mismatch");

  const std::vector<Sample> train =
      collect_unit_samples(corpus, plan.mode, config.intra_session, plan.train_units);
  std::vector<std::vector<Sample>> ft_sets;
  for (const auto& phase_units : plan.ft_phases)
    ft_sets.push_back(collect_unit_samples(corpus, plan.mode, config.intra_session, phase_units));
  const std::vector<Sample> eval =
      collect_unit_samples(corpus, plan.mode, config.intra_session, {plan.eval_unit});

  // leakage guard: no image instance may appear both in a training role and
  // in evaluation
  {
    std::set<const Tensor*> used;
    for (const Sample& s : train) used.insert(s.image);
    for (const auto& set : ft_sets)
      for (const Sample& s : set) used.insert(s.image);
    for (const Sample& s : eval)
      if (used.count(s.image))
        throw std::logic_error("run_protocol: evaluation image also used for training");
  }

  const std::uint64_t vanilla_seed = phase_seed(run_seed, 0);
  auto [spec, params] = build_default_network({1, corpus.height, corpus.width}, kClassCount,
                                              splitmix64_at(vanilla_seed, 0));

  ProtocolResult result;
  auto record_phase = [&](const std::string& name, std::vector<double> trace) {
    const EvalResult ev = evaluate_accuracy(spec, params, eval, config.batch_size);
    PhaseOutcome outcome;
    outcome.phase = name;
    outcome.correct = ev.correct;
    outcome.total = ev.total;
    outcome.accuracy = ev.accuracy();
    outcome.loss_trace = std::move(trace);
    if (capture_params) outcome.params_after = params;
    result.phases.push_back(std::move(outcome));
  };

  // vanilla: all parameters trainable at the initial learning rate
  set_freeze_boundary(spec, params, FreezeMode::none);
  {
    AdamState state = AdamState::init(params, AdamConfig{config.lr_initial});
    Prng shuffle_rng(splitmix64_at(vanilla_seed, 1));
    std::vector<double> trace =
        train_phase(spec, params, state, train, config.epochs_initial, config.batch_size, shuffle_rng);
    record_phase("vanilla", std::move(trace));
  }

  // incremental fine-tuning: frozen prefix, reduced rate, fresh optimizer
  set_freeze_boundary(spec, params, config.freeze_mode);
  for (std::size_t k = 0; k < ft_sets.size(); ++k) {
    AdamState state = AdamState::init(params, AdamConfig{config.lr_ft});
    Prng shuffle_rng(splitmix64_at(phase_seed(run_seed, static_cast<int>(k) + 1), 1));
    std::vector<double> trace = train_phase(spec, params, state, ft_sets[k],
                                            config.epochs_per_ft, config.batch_size, shuffle_rng);
    record_phase("ft" + std::to_string(k + 1), std::move(trace));
  }
  return result;
}

inline ProtocolResult run_protocol(const ExperimentConfig& config, const SessionCorpus& corpus,
                                   const SplitPlan& plan) {
  return run_protocol(config, corpus, plan, config.seed);
}

// ---------------------------------------------------------------------------
// Cross-validation

struct RunTimings {
  double total_seconds = 0.0;
  std::vector<double> per_repeat_seconds;
};

struct CrossValidationResult {
  std::vector<PhaseReport> reports;
  RunTimings timings;
};

inline SplitPlan canonical_plan(const ExperimentConfig& config, const SessionCorpus& corpus) {
  if (config.mode == SplitMode::intra_session) {
    if (config.intra_session < 1 ||
        static_cast<std::size_t>(config.intra_session) > corpus.sessions.size())
      throw std::invalid_argument("corpus has no session " + std::to_string(config.intra_session));
    return make_intra_plan(static_cast<int>(
        corpus.sessions[static_cast<std::size_t>(config.intra_session - 1)].size()));
  }
  return make_inter_plan(static_cast<int>(corpus.sessions.size()));
}

// Repeats the protocol on permuted plans with independent child generators
// (seed xor repeat index) and aggregates per-phase mean and sample std.
inline CrossValidationResult cross_validate(const ExperimentConfig& config,
                                            const SessionCorpus& corpus) {
  config.validate();
  const SplitPlan base = canonical_plan(config, corpus);

  std::vector<std::vector<double>> accuracies;
  std::vector<std::vector<std::size_t>> correct, total;
  std::vector<std::string> names;
  CrossValidationResult result;
  const auto t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < config.cv_repeats; ++r) {
    const auto r0 = std::chrono::steady_clock::now();
    Prng child(config.seed ^ static_cast<std::uint64_t>(r));
    const SplitPlan plan = config.cv_randomize ? permute_plan(base, child) : base;
    const std::uint64_t run_seed = child.next();
    const ProtocolResult run = run_protocol(config, corpus, plan, run_seed);
    if (r == 0) {
      names.reserve(run.phases.size());
      for (const PhaseOutcome& p : run.phases) names.push_back(p.phase);
      accuracies.resize(run.phases.size());
      correct.resize(run.phases.size());
      total.resize(run.phases.size());
    }
    for (std::size_t p = 0; p < run.phases.size(); ++p) {
      accuracies[p].push_back(run.phases[p].accuracy);
      correct[p].push_back(run.phases[p].correct);
      total[p].push_back(run.phases[p].total);
    }
    const auto r1 = std::chrono::steady_clock::now();
    result.timings.per_repeat_seconds.push_back(std::chrono::duration<double>(r1 - r0).count());
  }
  const auto t1 = std::chrono::steady_clock::now();
  result.timings.total_seconds = std::chrono::duration<double>(t1 - t0).count();

  for (std::size_t p = 0; p < names.size(); ++p)
    result.reports.push_back(aggregate_phase(names[p], accuracies[p], correct[p], total[p]));
  return result;
}

// ---------------------------------------------------------------------------
// Results document

// Timing fields live in their own sub-object so determinism checks can
// exclude them.
inline nlohmann::json results_document(const nlohmann::json& config_echo,
                                       const std::string& corpus_digest,
                                       const std::string& mode,
                                       const CrossValidationResult& cv) {
  nlohmann::json phases = nlohmann::json::array();
  for (const PhaseReport& report : cv.reports) {
    phases.push_back(nlohmann::json{{"phase", report.phase},
                                    {"accuracies", report.accuracies},
                                    {"correct", report.correct},
                                    {"total", report.total},
                                    {"mean", report.mean},
                                    {"sample_std", report.sample_std},
                                    {"std_defined", report.std_defined}});
  }
  return nlohmann::json{{"schema_version", 1},
                        {"kind", "sessionfit-results"},
                        {"mode", mode},
                        {"corpus_digest", corpus_digest},
                        {"config", config_echo},
                        {"phases", phases},
                        {"timing",
                         {{"total_seconds", cv.timings.total_seconds},
                          {"per_repeat_seconds", cv.timings.per_repeat_seconds}}}};
}

inline nlohmann::json results_without_timing(nlohmann::json doc) {
  doc.erase("timing");
  return doc;
}

}  // namespace sessionfit

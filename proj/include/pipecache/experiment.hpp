#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pipecache/frame.hpp"
#include "pipecache/pipeline.hpp"

namespace pipecache {

/// Evaluation measure: nDCG@k, AP or P@k.
struct Measure {
  enum class Kind { ndcg, ap, precision };

  Kind kind = Kind::ndcg;
  int k = 10;  ///< unused for AP

  /// "nDCG@10", "AP", "P@5".
  std::string name() const;
  /// Inverse of name(); case-insensitive. Throws PreconditionError.
  static Measure parse(std::string_view text);

  friend bool operator==(const Measure&, const Measure&) = default;
};

/// docno -> graded label for one qid. Labels > 0 are relevant.
using Judgments = std::unordered_map<std::string, std::int64_t>;

/// DCG@k / IDCG@k with gain 2^label - 1 and discount log2(rank + 2); the
/// ideal ranking uses every judged doc of the qid. 0 if nothing is
/// relevant.
double ndcg_at_k(std::span<const std::string> ranking, const Judgments& qrels,
                 int k);
/// Sum of precision at each relevant retrieved position, divided by the
/// number of judged relevant docs (0 if none).
double average_precision(std::span<const std::string> ranking,
                         const Judgments& qrels);
/// Relevant docs in the top k, divided by k.
double precision_at_k(std::span<const std::string> ranking,
                      const Judgments& qrels, int k);
double evaluate(const Measure& measure, std::span<const std::string> ranking,
                const Judgments& qrels);

struct TTest {
  double t = 0.0;
  double p = 1.0;
  /// Fewer than two pairs or all differences zero: t is NaN and p is 1.
  bool degenerate = false;
};

/// Two-sided paired Student t-test with n - 1 degrees of freedom. Constant
/// non-zero differences give an infinite t and p = 0.
TTest paired_t_test(std::span<const double> x, std::span<const double> y);

/// Holm step-down adjusted p-values, clipped to 1, in input order.
std::vector<double> holm_correction(std::span<const double> p_values);

/// Longest stage sequence shared (by struct_eq) by every list.
StageList lcp(std::span<const StageList> pipelines);
/// Each pipeline with `prefix` removed; an empty remainder is identity.
/// Throws PreconditionError if `prefix` is not a prefix of every pipeline.
std::vector<Transformer> remainders(std::span<const StageList> pipelines,
                                    const StageList& prefix);

/// Stage list used for prefix detection: flatten(t), with each rank cutoff
/// or scalar product stage X % k / X * c rewritten as the stages of X
/// followed by identity % k / identity * c. Evaluating the expanded list is
/// bit-identical to evaluating t.
StageList expand_stages(const Transformer& t);

struct ExperimentSpec {
  std::vector<Transformer> systems;
  /// Defaults to "system0", "system1", ... when empty.
  std::vector<std::string> names;
  Frame topics;  ///< Q
  Frame qrels;   ///< RA
  std::vector<Measure> measures;
  bool precompute_prefix = false;
  /// Index into systems; enables t-tests of every other system against it.
  std::optional<std::size_t> baseline;
};

struct SystemResult {
  std::string name;
  std::vector<double> means;                    ///< per measure
  std::vector<std::vector<double>> per_query;   ///< [measure][topic]
  std::vector<double> p_values;                 ///< per measure, if tested
  std::vector<double> p_corrected;              ///< Holm across systems
  double seconds = 0.0;                         ///< remainder wall clock
};

struct PrefixReport {
  bool applied = false;
  std::vector<std::string> stages;  ///< described shared stages
  double seconds = 0.0;
};

struct ExperimentResult {
  std::vector<Measure> measures;
  std::vector<std::string> qids;  ///< topic order
  std::vector<SystemResult> systems;
  std::optional<std::size_t> baseline;
  PrefixReport prefix;

  /// Header "name", one column per measure, then p_<measure> and
  /// p_holm_<measure> columns when a baseline was given. Reals use the
  /// shortest round-trip form.
  std::string to_tsv() const;
  std::string prefix_report() const;
  /// Measure tables (means, per-query values, p-values) bit-identical;
  /// timings and the prefix report are ignored.
  bool same_measures(const ExperimentResult& other) const;
};

/// Runs every system over the topics and evaluates it against the qrels.
/// With precompute_prefix, two or more systems and a non-empty shared
/// prefix (over expand_stages), the prefix runs once and each remainder
/// is applied to its output. Topics without qrels score 0.
ExperimentResult run(const ExperimentSpec& spec);

/// Per-qid rankings of a result frame: by score descending then docno when
/// a score column exists, otherwise row order. Repeated docnos keep their
/// first position.
std::unordered_map<std::string, std::vector<std::string>> rankings(
    const Frame& results);

/// qid -> judgments of an RA frame.
std::unordered_map<std::string, Judgments> group_qrels(const Frame& qrels);

}  // namespace pipecache

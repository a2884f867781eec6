#include "pipecache/experiment.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "pipecache/errors.hpp"

namespace pipecache {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

double gain(std::int64_t label) {
  return label > 0 ? std::exp2(static_cast<double>(label)) - 1.0 : 0.0;
}

std::int64_t label_of(const Judgments& qrels, const std::string& docno) {
  auto it = qrels.find(docno);
  return it == qrels.end() ? 0 : it->second;
}

}  // namespace

std::string Measure::name() const {
  switch (kind) {
    case Kind::ndcg:
      return "nDCG@" + std::to_string(k);
    case Kind::ap:
      return "AP";
    case Kind::precision:
      return "P@" + std::to_string(k);
  }
  return "?";
}

Measure Measure::parse(std::string_view text) {
  const auto s = lower(text);
  if (s == "ap" || s == "map") return {Kind::ap, 0};
  const auto at = s.find('@');
  if (at == std::string::npos) {
    throw PreconditionError("unknown measure '" + std::string(text) + "'");
  }
  const auto head = s.substr(0, at);
  const auto tail = s.substr(at + 1);
  Measure m;
  if (head == "ndcg") {
    m.kind = Kind::ndcg;
  } else if (head == "p") {
    m.kind = Kind::precision;
  } else {
    throw PreconditionError("unknown measure '" + std::string(text) + "'");
  }
  if (tail.empty() || tail.size() > 9 ||
      !std::all_of(tail.begin(), tail.end(),
                   [](char c) { return c >= '0' && c <= '9'; })) {
    throw PreconditionError("measure '" + std::string(text) +
                            "' needs a positive integer depth");
  }
  m.k = std::stoi(tail);
  if (m.k < 1) {
    throw PreconditionError("measure depth must be >= 1 in '" +
                            std::string(text) + "'");
  }
  return m;
}

double ndcg_at_k(std::span<const std::string> ranking, const Judgments& qrels,
                 int k) {
  if (k < 1) throw PreconditionError("nDCG depth must be >= 1");
  std::vector<double> ideal;
  for (const auto& [docno, label] : qrels) {
    if (label > 0) ideal.push_back(gain(label));
  }
  if (ideal.empty()) return 0.0;
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  const auto depth = static_cast<std::size_t>(k);
  double idcg = 0.0;
  for (std::size_t i = 0; i < std::min(depth, ideal.size()); ++i) {
    idcg += ideal[i] / std::log2(static_cast<double>(i) + 2.0);
  }
  double dcg = 0.0;
  for (std::size_t i = 0; i < std::min(depth, ranking.size()); ++i) {
    dcg += gain(label_of(qrels, ranking[i])) /
           std::log2(static_cast<double>(i) + 2.0);
  }
  return dcg / idcg;
}

double average_precision(std::span<const std::string> ranking,
                         const Judgments& qrels) {
  const auto relevant = std::count_if(
      qrels.begin(), qrels.end(), [](const auto& kv) { return kv.second > 0; });
  if (relevant == 0) return 0.0;
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ranking.size(); ++i) {
    if (label_of(qrels, ranking[i]) > 0) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
  }
  return sum / static_cast<double>(relevant);
}

double precision_at_k(std::span<const std::string> ranking,
                      const Judgments& qrels, int k) {
  if (k < 1) throw PreconditionError("precision depth must be >= 1");
  const auto depth = std::min(static_cast<std::size_t>(k), ranking.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < depth; ++i) {
    hits += label_of(qrels, ranking[i]) > 0;
  }
  return static_cast<double>(hits) / static_cast<double>(k);
}

double evaluate(const Measure& measure, std::span<const std::string> ranking,
                const Judgments& qrels) {
  switch (measure.kind) {
    case Measure::Kind::ndcg:
      return ndcg_at_k(ranking, qrels, measure.k);
    case Measure::Kind::ap:
      return average_precision(ranking, qrels);
    case Measure::Kind::precision:
      return precision_at_k(ranking, qrels, measure.k);
  }
  return 0.0;
}

TTest paired_t_test(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw PreconditionError("paired t-test needs equal-length samples");
  }
  TTest out;
  const std::size_t n = x.size();
  if (n < 2) {
    out.t = std::numeric_limits<double>::quiet_NaN();
    out.degenerate = true;
    return out;
  }
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = x[i] - y[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (sd == 0.0) {
    if (mean == 0.0) {
      out.t = std::numeric_limits<double>::quiet_NaN();
      out.degenerate = true;
      return out;
    }
    out.t = mean > 0 ? std::numeric_limits<double>::infinity()
                     : -std::numeric_limits<double>::infinity();
    out.p = 0.0;
    return out;
  }
  out.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  boost::math::students_t dist(static_cast<double>(n - 1));
  out.p = std::min(1.0, 2.0 * boost::math::cdf(dist, -std::fabs(out.t)));
  return out;
}

std::vector<double> holm_correction(std::span<const double> p_values) {
  const std::size_t m = p_values.size();
  for (double p : p_values) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw PreconditionError("p-values must lie in [0, 1]");
    }
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
    return p_values[a] < p_values[b];
  });
  std::vector<double> out(m);
  double running = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double adj =
        std::min(1.0, static_cast<double>(m - i) * p_values[order[i]]);
    running = std::max(running, adj);
    out[order[i]] = running;
  }
  return out;
}

StageList lcp(std::span<const StageList> pipelines) {
  if (pipelines.empty()) return {};
  StageList out;
  for (std::size_t j = 0;; ++j) {
    if (j >= pipelines[0].size()) return out;
    const auto& candidate = pipelines[0][j];
    for (const auto& p : pipelines.subspan(1)) {
      if (j >= p.size() || !struct_eq(p[j], candidate)) return out;
    }
    out.push_back(candidate);
  }
}

std::vector<Transformer> remainders(std::span<const StageList> pipelines,
                                    const StageList& prefix) {
  std::vector<Transformer> out;
  out.reserve(pipelines.size());
  for (const auto& p : pipelines) {
    if (p.size() < prefix.size() ||
        !std::equal(prefix.begin(), prefix.end(), p.begin(),
                    [](const auto& a, const auto& b) { return struct_eq(a, b); })) {
      throw PreconditionError("stage list is not a prefix of every pipeline");
    }
    out.push_back(from_stages(StageList(p.begin() + prefix.size(), p.end())));
  }
  return out;
}

StageList expand_stages(const Transformer& t) {
  StageList out;
  for (const auto& stage : flatten(t)) {
    if (stage.kind() == NodeKind::cutoff) {
      auto inner = expand_stages(stage.inner());
      out.insert(out.end(), inner.begin(), inner.end());
      out.push_back(Transformer::cutoff(Transformer::identity(), stage.cutoff_k()));
    } else if (stage.kind() == NodeKind::scalar_product) {
      auto inner = expand_stages(stage.inner());
      out.insert(out.end(), inner.begin(), inner.end());
      out.push_back(
          Transformer::scalar_product(Transformer::identity(), stage.scalar()));
    } else {
      out.push_back(stage);
    }
  }
  return out;
}

std::unordered_map<std::string, std::vector<std::string>> rankings(
    const Frame& results) {
  std::unordered_map<std::string, std::vector<std::string>> out;
  if (results.empty()) return out;
  const auto qid = results.require_column("qid", ValueKind::text);
  const auto docno = results.require_column("docno", ValueKind::text);
  const auto score_idx = results.column_index("score");
  const bool scored =
      score_idx && results.columns()[*score_idx].kind == ValueKind::real;

  std::vector<std::size_t> order(results.num_rows());
  std::iota(order.begin(), order.end(), 0);
  if (scored) {
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
      const double sa = results.real(a, *score_idx);
      const double sb = results.real(b, *score_idx);
      if (sa != sb) return sa > sb;
      return results.text(a, docno) < results.text(b, docno);
    });
  }
  std::unordered_map<std::string, std::unordered_set<std::string>> seen;
  for (auto r : order) {
    const auto& q = results.text(r, qid);
    const auto& d = results.text(r, docno);
    if (seen[q].insert(d).second) out[q].push_back(d);
  }
  return out;
}

std::unordered_map<std::string, Judgments> group_qrels(const Frame& qrels) {
  std::unordered_map<std::string, Judgments> out;
  if (qrels.empty()) return out;
  const auto qid = qrels.require_column("qid", ValueKind::text);
  const auto docno = qrels.require_column("docno", ValueKind::text);
  const auto label = qrels.require_column("label", ValueKind::integer);
  for (std::size_t r = 0; r < qrels.num_rows(); ++r) {
    out[qrels.text(r, qid)][qrels.text(r, docno)] = qrels.integer(r, label);
  }
  return out;
}

ExperimentResult run(const ExperimentSpec& spec) {
  using Clock = std::chrono::steady_clock;
  const std::size_t n = spec.systems.size();
  if (n == 0) throw PreconditionError("experiment needs at least one system");
  if (spec.measures.empty()) {
    throw PreconditionError("experiment needs at least one measure");
  }
  if (!spec.names.empty() && spec.names.size() != n) {
    throw PreconditionError("experiment has " + std::to_string(n) +
                            " systems but " + std::to_string(spec.names.size()) +
                            " names");
  }
  if (spec.baseline && *spec.baseline >= n) {
    throw PreconditionError("baseline index out of range");
  }
  require_conforms(spec.topics, RelationKind::Q, "experiment topics");
  require_conforms(spec.qrels, RelationKind::RA, "experiment qrels");

  ExperimentResult result;
  result.measures = spec.measures;
  result.baseline = spec.baseline;
  {
    const auto qid = spec.topics.require_column("qid", ValueKind::text);
    std::unordered_set<std::string> seen;
    for (std::size_t r = 0; r < spec.topics.num_rows(); ++r) {
      if (seen.insert(spec.topics.text(r, qid)).second) {
        result.qids.push_back(spec.topics.text(r, qid));
      }
    }
  }

  std::vector<Transformer> to_run = spec.systems;
  Frame input = spec.topics;
  if (spec.precompute_prefix && n >= 2) {
    std::vector<StageList> lists;
    for (const auto& s : spec.systems) lists.push_back(expand_stages(s));
    const auto shared = lcp(lists);
    if (!shared.empty()) {
      const auto start = Clock::now();
      input = apply(from_stages(shared), spec.topics);
      result.prefix.seconds =
          std::chrono::duration<double>(Clock::now() - start).count();
      result.prefix.applied = true;
      for (const auto& s : shared) result.prefix.stages.push_back(describe(s));
      to_run = remainders(lists, shared);
    }
  }

  const auto judgments = group_qrels(spec.qrels);
  static const Judgments kNoJudgments;
  for (std::size_t i = 0; i < n; ++i) {
    SystemResult sys;
    sys.name = spec.names.empty() ? "system" + std::to_string(i) : spec.names[i];
    const auto start = Clock::now();
    const Frame out = apply(to_run[i], input);
    sys.seconds = std::chrono::duration<double>(Clock::now() - start).count();

    const auto ranked = rankings(out);
    static const std::vector<std::string> kEmpty;
    sys.per_query.assign(spec.measures.size(), {});
    sys.means.assign(spec.measures.size(), 0.0);
    for (std::size_t m = 0; m < spec.measures.size(); ++m) {
      auto& values = sys.per_query[m];
      for (const auto& q : result.qids) {
        auto r = ranked.find(q);
        auto j = judgments.find(q);
        values.push_back(evaluate(spec.measures[m],
                                  r == ranked.end() ? kEmpty : r->second,
                                  j == judgments.end() ? kNoJudgments : j->second));
      }
      if (!values.empty()) {
        sys.means[m] = std::accumulate(values.begin(), values.end(), 0.0) /
                       static_cast<double>(values.size());
      }
    }
    result.systems.push_back(std::move(sys));
  }

  if (spec.baseline) {
    const auto& base = result.systems[*spec.baseline];
    for (std::size_t m = 0; m < spec.measures.size(); ++m) {
      std::vector<double> raw;
      std::vector<std::size_t> tested;
      for (std::size_t i = 0; i < n; ++i) {
        auto& sys = result.systems[i];
        sys.p_values.resize(spec.measures.size(), 1.0);
        sys.p_corrected.resize(spec.measures.size(), 1.0);
        if (i == *spec.baseline) continue;
        sys.p_values[m] = paired_t_test(sys.per_query[m], base.per_query[m]).p;
        raw.push_back(sys.p_values[m]);
        tested.push_back(i);
      }
      const auto adjusted = holm_correction(raw);
      for (std::size_t t = 0; t < tested.size(); ++t) {
        result.systems[tested[t]].p_corrected[m] = adjusted[t];
      }
    }
  }
  return result;
}

std::string ExperimentResult::to_tsv() const {
  std::ostringstream out;
  out << "name";
  for (const auto& m : measures) out << '\t' << m.name();
  if (baseline) {
    for (const auto& m : measures) out << "\tp_" << m.name();
    for (const auto& m : measures) out << "\tp_holm_" << m.name();
  }
  out << '\n';
  for (std::size_t i = 0; i < systems.size(); ++i) {
    const auto& s = systems[i];
    out << s.name;
    for (double v : s.means) out << '\t' << format_real(v);
    if (baseline) {
      const bool base = i == *baseline;
      for (std::size_t m = 0; m < measures.size(); ++m) {
        out << '\t' << (base ? "-" : format_real(s.p_values[m]));
      }
      for (std::size_t m = 0; m < measures.size(); ++m) {
        out << '\t' << (base ? "-" : format_real(s.p_corrected[m]));
      }
    }
    out << '\n';
  }
  return out.str();
}

std::string ExperimentResult::prefix_report() const {
  if (!prefix.applied) return "prefix: none\n";
  std::ostringstream out;
  out << "prefix: " << prefix.stages.size() << " stage"
      << (prefix.stages.size() == 1 ? "" : "s") << "\n";
  for (std::size_t i = 0; i < prefix.stages.size(); ++i) {
    out << "  [" << i << "] " << prefix.stages[i] << "\n";
  }
  return out.str();
}

namespace {

bool same_reals(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         std::equal(a.begin(), a.end(), b.begin(),
                    [](double x, double y) { return bit_equal(x, y); });
}

}  // namespace

bool ExperimentResult::same_measures(const ExperimentResult& other) const {
  if (measures != other.measures || qids != other.qids ||
      baseline != other.baseline || systems.size() != other.systems.size()) {
    return false;
  }
  for (std::size_t i = 0; i < systems.size(); ++i) {
    const auto& a = systems[i];
    const auto& b = other.systems[i];
    if (a.name != b.name || !same_reals(a.means, b.means) ||
        !same_reals(a.p_values, b.p_values) ||
        !same_reals(a.p_corrected, b.p_corrected) ||
        a.per_query.size() != b.per_query.size()) {
      return false;
    }
    for (std::size_t m = 0; m < a.per_query.size(); ++m) {
      if (!same_reals(a.per_query[m], b.per_query[m])) return false;
    }
  }
  return true;
}

}  // namespace pipecache

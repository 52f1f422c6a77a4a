#include "pta/evalharness.hpp"

#include "pta/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pta {

const Embedding& Gallery::at(std::size_t id) const {
  if (id < items.size()) return items[id];
  if (id < size()) return injected[id - items.size()];
  throw LookupError("gallery id " + std::to_string(id) + " out of range");
}

Gallery Gallery::with_originals() const {
  if (injected_originals.size() != injected.size())
    throw PreconditionError("gallery: one clean original is required per injected item");
  Gallery g = *this;
  g.injected = injected_originals;
  return g;
}

void Gallery::validate() const {
  if (size() == 0) throw DomainError("gallery is empty");
  if (!item_clusters.empty() && item_clusters.size() != items.size())
    throw DomainError("gallery: item_clusters must be empty or match the item count");
  const auto d = at(0).size();
  for (std::size_t i = 0; i < size(); ++i)
    if (at(i).size() != d) throw DomainError("gallery: embedding " + std::to_string(i) + " has the wrong dimension");
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j{{"asr", asr},
                   {"asrd", asrd},
                   {"n_total", n_total},
                   {"n_success", n_success},
                   {"n_pre_success", n_pre_success},
                   {"n_detected", n_detected}};
  auto opt = [&](const char* key, const std::optional<double>& v) {
    j[key] = v ? nlohmann::json(*v) : nlohmann::json();
  };
  opt("recall_before", recall_before);
  opt("recall_at_1", recall_at_1);
  opt("recall_drop", recall_drop);
  opt("mean_rank", mean_rank);
  return j;
}

void SuccessFlags::append(const SuccessFlags& other) {
  success.insert(success.end(), other.success.begin(), other.success.end());
  pre_success.insert(pre_success.end(), other.pre_success.begin(), other.pre_success.end());
  detected.insert(detected.end(), other.detected.begin(), other.detected.end());
}

MetricReport success_report(const std::vector<bool>& success, const std::vector<bool>& pre_success,
                            const std::vector<bool>& detected) {
  const std::size_t n = success.size();
  if (n == 0) throw DomainError("success_report: no items (N_total = 0)");
  if (pre_success.size() != n || (!detected.empty() && detected.size() != n))
    throw DomainError("success_report: flag vectors differ in length");
  MetricReport r;
  r.n_total = n;
  std::size_t fresh = 0, kept = 0;
  for (std::size_t i = 0; i < n; ++i) {
    r.n_success += success[i];
    r.n_pre_success += pre_success[i];
    if (success[i] && !pre_success[i]) {
      ++fresh;
      const bool det = !detected.empty() && detected[i];
      r.n_detected += det;
      kept += !det;
    }
  }
  r.asr = 100.0 * static_cast<double>(fresh) / static_cast<double>(n);
  r.asrd = 100.0 * static_cast<double>(kept) / static_cast<double>(n);
  return r;
}

double asrd(const std::vector<bool>& success, const std::vector<bool>& pre_success, const std::vector<bool>& detected) {
  return success_report(success, pre_success, detected).asrd;
}

std::size_t classify(const Embedding& candidate, std::span<const EmbeddingSet> class_prompts) {
  if (class_prompts.empty()) throw ConfigError("classify: empty class list");
  std::size_t best = 0;
  double best_sim = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < class_prompts.size(); ++c) {
    if (class_prompts[c].empty()) throw ConfigError("classify: class " + std::to_string(c) + " has no prompts");
    double s = -std::numeric_limits<double>::infinity();
    for (const auto& p : class_prompts[c].members) s = std::max(s, cosine(candidate, p));
    if (s > best_sim) {
      best_sim = s;
      best = c;
    }
  }
  return best;
}

MetricReport classification_report(std::span<const ClassificationOutcome> outcomes) {
  std::vector<bool> success, pre, det;
  for (const auto& o : outcomes) {
    success.push_back(o.post_class == o.target_class);
    pre.push_back(o.pre_class == o.target_class);
    det.push_back(o.detected);
  }
  return success_report(success, pre, det);
}

double cls_asr(std::span<const ClassificationOutcome> outcomes) {
  return classification_report(outcomes).asr;
}

std::vector<std::size_t> retrieve_topk(const Embedding& query, const Gallery& g, std::size_t K) {
  if (K == 0 || K > g.size())
    throw ConfigError("retrieve_topk: K = " + std::to_string(K) + " must lie in [1, " + std::to_string(g.size()) + "]");
  std::vector<double> sim(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) sim[i] = cosine(query, g.at(i));
  std::vector<std::size_t> ids(g.size());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(K), ids.end(),
                    [&](std::size_t a, std::size_t b) { return sim[a] > sim[b] || (sim[a] == sim[b] && a < b); });
  ids.resize(K);
  return ids;
}

std::vector<bool> retrieval_success(std::span<const Embedding> queries, const Gallery& g, std::size_t K,
                                    const std::vector<bool>& injected_flagged) {
  if (!injected_flagged.empty() && injected_flagged.size() != g.injected.size())
    throw DomainError("retrieval_success: one flag per injected item is required");
  std::vector<bool> out;
  out.reserve(queries.size());
  for (const auto& q : queries) {
    bool hit = false;
    for (auto id : retrieve_topk(q, g, K)) {
      if (g.is_injected(id) && (injected_flagged.empty() || !injected_flagged[id - g.items.size()])) {
        hit = true;
        break;
      }
    }
    out.push_back(hit);
  }
  return out;
}

namespace {

std::vector<bool> pre_attack_success(std::span<const Embedding> queries, const Gallery& g, std::size_t K) {
  if (g.injected_originals.empty()) return std::vector<bool>(queries.size(), false);
  return retrieval_success(queries, g.with_originals(), K);
}

}  // namespace

double rk_asr(std::span<const Embedding> queries, const Gallery& g, std::size_t K) {
  if (queries.empty()) throw DomainError("rk_asr: no queries");
  const auto success = retrieval_success(queries, g, K);
  const auto pre = pre_attack_success(queries, g, K);
  return success_report(success, pre, {}).asr;
}

std::vector<bool> detect_in_window(std::span<const Embedding> queries, const Gallery& g, std::size_t window_k,
                                   const DetectionConfig& cfg) {
  std::vector<std::size_t> window;
  for (const auto& q : queries) {
    const auto top = retrieve_topk(q, g, window_k);
    window.insert(window.end(), top.begin(), top.end());
  }
  std::sort(window.begin(), window.end());
  window.erase(std::unique(window.begin(), window.end()), window.end());

  std::vector<bool> flagged(g.injected.size(), false);
  if (std::none_of(window.begin(), window.end(), [&](std::size_t id) { return g.is_injected(id); })) return flagged;

  std::vector<Embedding> pts;
  pts.reserve(window.size());
  for (auto id : window) pts.push_back(g.at(id));
  const std::size_t budget = std::min(g.injected.size(), pts.size());
  const auto res = detect_top(pts, budget, cfg);
  for (std::size_t w = 0; w < window.size(); ++w)
    if (g.is_injected(window[w]) && res.flagged(w)) flagged[window[w] - g.items.size()] = true;
  return flagged;
}

bool detect_in_pool(const Embedding& ae, std::span<const Embedding> reference, const DetectionConfig& cfg) {
  if (reference.empty()) throw DomainError("detect_in_pool: empty reference set");
  std::vector<Embedding> pool(reference.begin(), reference.end());
  pool.push_back(ae);
  return detect_top(pool, 1, cfg).flagged(pool.size() - 1);
}

SuccessFlags retrieval_flags(std::span<const Embedding> queries, const Gallery& g, std::size_t success_k,
                             const std::vector<bool>& injected_flagged) {
  if (queries.empty()) throw DomainError("retrieval_flags: no queries");
  SuccessFlags f;
  f.success = retrieval_success(queries, g, success_k);
  f.pre_success = pre_attack_success(queries, g, success_k);
  f.detected.assign(queries.size(), false);
  if (!injected_flagged.empty()) {
    const auto survived = retrieval_success(queries, g, success_k, injected_flagged);
    for (std::size_t i = 0; i < queries.size(); ++i) f.detected[i] = f.success[i] && !survived[i];
  }
  return f;
}

std::size_t injection_count(double ratio, std::size_t items) {
  if (!(ratio >= 0.0) || !std::isfinite(ratio)) throw ConfigError("injection ratio must be finite and >= 0");
  const double m = std::ceil(ratio * static_cast<double>(items) - 1e-9);
  return m <= 0.0 ? 0 : static_cast<std::size_t>(m);
}

double recall_at_1(std::span<const Embedding> queries, std::span<const std::size_t> truth, const Gallery& g) {
  if (queries.empty()) throw DomainError("recall_at_1: no queries");
  if (truth.size() != queries.size()) throw DomainError("recall_at_1: one ground-truth item per query is required");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (truth[i] >= g.items.size()) throw LookupError("recall_at_1: ground truth is not a gallery item");
    hits += retrieve_topk(queries[i], g, 1).front() == truth[i];
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(queries.size());
}

PoisoningOutcome poisoning_degradation(std::span<const Embedding> queries, std::span<const std::size_t> truth,
                                       std::span<const Embedding> items, std::span<const Embedding> aes, double ratio) {
  const std::size_t m = injection_count(ratio, items.size());
  if (m > aes.size()) {
    throw ConfigError("poisoning: ratio " + std::to_string(ratio) + " needs " + std::to_string(m) + " AEs but only " +
                      std::to_string(aes.size()) + " are available");
  }
  Gallery g;
  g.items.assign(items.begin(), items.end());
  PoisoningOutcome out;
  out.recall_before = recall_at_1(queries, truth, g);
  g.injected.assign(aes.begin(), aes.begin() + static_cast<std::ptrdiff_t>(m));
  out.recall_after = recall_at_1(queries, truth, g);
  out.drop = out.recall_before - out.recall_after;
  out.injected = m;
  return out;
}

}  // namespace pta

#pragma once

#include "pta/detect.hpp"
#include "pta/numerics.hpp"

#include "json.hpp"

#include <optional>
#include <vector>

namespace pta {

/// Retrieval corpus: benign items (ids 0..N-1) followed by injected AEs (ids N..).
///
/// `injected_originals`, when non-empty, holds the embeddings of the clean
/// inputs the AEs were made from, one per injected item; it is used to compute
/// pre-attack successes.
struct Gallery {
  std::vector<Embedding> items;
  std::vector<std::size_t> item_clusters;  // empty or one per item
  std::vector<Embedding> injected;
  std::vector<Embedding> injected_originals;

  std::size_t size() const noexcept { return items.size() + injected.size(); }
  bool is_injected(std::size_t id) const noexcept { return id >= items.size() && id < size(); }
  const Embedding& at(std::size_t id) const;
  double injection_ratio() const noexcept {
    return size() == 0 ? 0.0 : static_cast<double>(injected.size()) / static_cast<double>(size());
  }
  /// Copy with every injected AE replaced by its clean original.
  Gallery with_originals() const;
  void validate() const;
};

struct MetricReport {
  double asr = 0.0;
  double asrd = 0.0;
  std::optional<double> recall_before;
  std::optional<double> recall_at_1;
  std::optional<double> recall_drop;
  std::optional<double> mean_rank;
  std::size_t n_total = 0;
  std::size_t n_success = 0;      // |A_success|
  std::size_t n_pre_success = 0;  // |A'_success|
  std::size_t n_detected = 0;     // |(A_success \ A') ∩ A_detected|

  nlohmann::json to_json() const;
};

/// Per-item membership in A_success, A'_success and A_detected.
struct SuccessFlags {
  std::vector<bool> success;
  std::vector<bool> pre_success;
  std::vector<bool> detected;

  void append(const SuccessFlags& other);
};

/// ASR/ASRD from per-item membership flags:
/// asr = 100 |A \ A'| / N, asrd = 100 |(A \ A') \ D| / N.
MetricReport success_report(const std::vector<bool>& success, const std::vector<bool>& pre_success,
                            const std::vector<bool>& detected);
inline MetricReport success_report(const SuccessFlags& f) {
  return success_report(f.success, f.pre_success, f.detected);
}

/// Zero-shot classification: argmax over classes of the best prompt cosine;
/// ties go to the lowest class index.
std::size_t classify(const Embedding& candidate, std::span<const EmbeddingSet> class_prompts);

struct ClassificationOutcome {
  std::size_t pre_class = 0;
  std::size_t post_class = 0;
  std::size_t target_class = 0;
  bool detected = false;
};

double cls_asr(std::span<const ClassificationOutcome> outcomes);
MetricReport classification_report(std::span<const ClassificationOutcome> outcomes);

/// Top-K ids by descending cosine, ties by ascending id.
std::vector<std::size_t> retrieve_topk(const Embedding& query, const Gallery& g, std::size_t K);

/// Per-query success: some injected item within the query's top-K.
std::vector<bool> retrieval_success(std::span<const Embedding> queries, const Gallery& g, std::size_t K,
                                    const std::vector<bool>& injected_flagged = {});

/// R@K ASR in percent; A' uses the clean originals of the injected items.
double rk_asr(std::span<const Embedding> queries, const Gallery& g, std::size_t K);

/// Detection over the deduplicated union of every query's top-`window_k`
/// list. Exactly the |injected|-highest scores in the window are flagged.
/// Returns one flag per injected item (false when outside the window).
std::vector<bool> detect_in_window(std::span<const Embedding> queries, const Gallery& g, std::size_t window_k,
                                   const DetectionConfig& cfg);

/// Whether `ae` holds the single highest score in reference ∪ {ae}.
bool detect_in_pool(const Embedding& ae, std::span<const Embedding> reference, const DetectionConfig& cfg);

/// Retrieval ASR and ASRD. A query remains a success after detection when
/// some unflagged injected item is in its top-`success_k`.
SuccessFlags retrieval_flags(std::span<const Embedding> queries, const Gallery& g, std::size_t success_k,
                             const std::vector<bool>& injected_flagged);
inline MetricReport retrieval_report(std::span<const Embedding> queries, const Gallery& g, std::size_t success_k,
                                     const std::vector<bool>& injected_flagged) {
  return success_report(retrieval_flags(queries, g, success_k, injected_flagged));
}

/// Rate after removing detected successes: 100 |(A \ A') \ D| / N.
double asrd(const std::vector<bool>& success, const std::vector<bool>& pre_success, const std::vector<bool>& detected);

struct PoisoningOutcome {
  double recall_before = 0.0;
  double recall_after = 0.0;
  double drop = 0.0;
  std::size_t injected = 0;
};

/// Number of AEs injected at `ratio`: ceil(ratio * items), with a 1e-9 guard
/// against rounding in the product.
std::size_t injection_count(double ratio, std::size_t items);

/// Recall@1 of `queries` (ground truth `truth[i]` indexes gallery items)
/// before and after injecting the first injection_count(ratio) of `aes`.
PoisoningOutcome poisoning_degradation(std::span<const Embedding> queries, std::span<const std::size_t> truth,
                                       std::span<const Embedding> items, std::span<const Embedding> aes, double ratio);

double recall_at_1(std::span<const Embedding> queries, std::span<const std::size_t> truth, const Gallery& g);

}  // namespace pta

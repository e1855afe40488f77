#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lprobe/analysis.hpp"
#include "lprobe/error.hpp"

namespace lprobe {

enum class Stage { unperturbed, perturbed };

std::string to_string(Stage stage);
Stage stage_from(const std::string& text);

/// Choice 1 means "this is an image of label y"; 2 something else, 3 unclear,
/// 4 not meaningful. Only 1 counts as agreeing with the label.
inline constexpr int kChoiceMatches = 1;

struct VoteRecord {
  std::string judge;
  std::string image_id;
  Stage stage = Stage::unperturbed;
  int choice = 0;
  std::int64_t timestamp_ms = 0;
};

enum class LabelingFailure {
  unknown_judge,
  unknown_image,
  invalid_choice,
  not_served,
  panel_full,
  stage_violation,
  duplicate_conflict,
  incomplete,
};

class LabelingRejected : public LabelingError {
 public:
  LabelingRejected(LabelingFailure failure, const std::string& what) : LabelingError(what), failure_(failure) {}
  LabelingFailure failure() const { return failure_; }

 private:
  LabelingFailure failure_;
};

/// Disposition rule over a complete vote set.
///
/// `unperturbed` holds one choice per panel member; `perturbed` holds the
/// choices of exactly those members who chose 1 at the first stage. Fewer
/// than a strict majority of 1s at stage one rejects the unperturbed image;
/// otherwise a strict majority of 1s at stage two is a success, anything else
/// (ties included) is class_changed. Throws LabelingRejected(incomplete) if
/// the vote set does not have that form.
Outcome decide_disposition(const std::vector<int>& unperturbed, const std::vector<int>& perturbed,
                           std::size_t panel_size);

struct LabelItem {
  std::string image_id;
  std::string label_name;
};

struct LabelTask {
  std::size_t item_index = 0;
  std::string image_id;
  std::string label_name;
  Stage stage = Stage::unperturbed;
};

struct VoteAck {
  std::uint64_t sequence = 0;
  bool duplicate = false;
};

struct LabelingOptions {
  std::size_t panel_size = 5;
  std::chrono::milliseconds reservation_ttl{std::chrono::minutes(10)};
  std::uint64_t order_seed = 0;
  /// Vote log (JSONL). Replayed on construction when it exists; empty disables persistence.
  std::filesystem::path log_path;
};

/// Thread-safe vote store. The vote log is the source of truth: a new store
/// over the same log reproduces the same dispositions.
class LabelingStore {
 public:
  using Clock = std::function<std::int64_t()>;

  LabelingStore(std::vector<LabelItem> items, std::vector<std::string> judges, LabelingOptions options,
                Clock clock = {});

  void register_judge(const std::string& judge);
  bool has_judge(const std::string& judge) const;

  const std::vector<LabelItem>& items() const { return items_; }
  std::optional<std::size_t> item_index(const std::string& image_id) const;

  /// Next task for the judge: a pending perturbed-stage vote first, otherwise
  /// an unperturbed image with panel capacity. Never re-serves a voted stage.
  std::optional<LabelTask> next_task(const std::string& judge);

  VoteAck submit_vote(VoteRecord vote);

  bool is_complete(const std::string& image_id) const;
  Disposition aggregate(const std::string& image_id) const;
  /// Dispositions of every image whose panel is complete.
  std::vector<Disposition> dispositions() const;
  std::size_t vote_count() const;

 private:
  struct ImageVotes {
    // judge -> (choice, sequence)
    std::map<std::string, std::pair<int, std::uint64_t>> unperturbed;
    std::map<std::string, std::pair<int, std::uint64_t>> perturbed;
    // judge -> reservation expiry
    std::map<std::string, std::int64_t> reservations;
  };

  VoteAck apply(const VoteRecord& vote, bool replay);
  Disposition aggregate_locked(std::size_t index) const;
  bool complete_locked(std::size_t index) const;
  std::size_t occupied(const ImageVotes& v, const std::string& judge, std::int64_t now) const;
  std::vector<std::size_t> order_for(const std::string& judge) const;
  std::int64_t now() const;

  std::vector<LabelItem> items_;
  std::map<std::string, std::size_t> index_;
  std::set<std::string> judges_;
  LabelingOptions options_;
  Clock clock_;
  std::vector<ImageVotes> votes_;
  std::uint64_t next_sequence_ = 1;
  std::size_t vote_count_ = 0;
  std::ofstream log_;
  mutable std::mutex mutex_;
};

}  // namespace lprobe

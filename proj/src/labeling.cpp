#include "lprobe/labeling.hpp"

#include <algorithm>
#include <random>

#include <json.hpp>

namespace lprobe {

namespace {

using nlohmann::json;

std::size_t majority(std::size_t n) { return n / 2 + 1; }

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

std::string to_string(Stage stage) { return stage == Stage::unperturbed ? "unperturbed" : "perturbed"; }

Stage stage_from(const std::string& text) {
  if (text == "unperturbed") return Stage::unperturbed;
  if (text == "perturbed") return Stage::perturbed;
  throw LabelingRejected(LabelingFailure::stage_violation, "unknown stage '" + text + "'");
}

Outcome decide_disposition(const std::vector<int>& unperturbed, const std::vector<int>& perturbed,
                           std::size_t panel_size) {
  if (unperturbed.size() != panel_size)
    throw LabelingRejected(LabelingFailure::incomplete, "unperturbed panel incomplete");
  const auto keep = static_cast<std::size_t>(std::count(unperturbed.begin(), unperturbed.end(), kChoiceMatches));
  if (keep < majority(panel_size)) return Outcome::unpert_rejected;
  if (perturbed.size() != keep) throw LabelingRejected(LabelingFailure::incomplete, "perturbed votes incomplete");
  const auto still = static_cast<std::size_t>(std::count(perturbed.begin(), perturbed.end(), kChoiceMatches));
  return 2 * still > keep ? Outcome::success : Outcome::class_changed;
}

LabelingStore::LabelingStore(std::vector<LabelItem> items, std::vector<std::string> judges, LabelingOptions options,
                             Clock clock)
    : items_(std::move(items)), judges_(judges.begin(), judges.end()), options_(std::move(options)),
      clock_(std::move(clock)), votes_(items_.size()) {
  if (options_.panel_size == 0) throw ConfigError("panel_size must be positive");
  for (std::size_t i = 0; i < items_.size(); ++i)
    if (!index_.emplace(items_[i].image_id, i).second)
      throw ConfigError("duplicate image id '" + items_[i].image_id + "'");

  if (options_.log_path.empty()) return;
  if (std::filesystem::exists(options_.log_path)) {
    std::ifstream in(options_.log_path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception&) {
        // A torn final line from an interrupted append is dropped.
        if (in.peek() == std::char_traits<char>::eof()) break;
        throw ConfigError("corrupt vote log line " + std::to_string(lineno));
      }
      VoteRecord v{j.at("judge"), j.at("image_id"), stage_from(j.at("stage")), j.at("choice"),
                   j.value("timestamp", std::int64_t{0})};
      judges_.insert(v.judge);
      apply(v, true);
    }
  }
  log_.open(options_.log_path, std::ios::app);
  if (!log_) throw ConfigError("cannot open vote log " + options_.log_path.string());
}

std::int64_t LabelingStore::now() const {
  if (clock_) return clock_();
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

void LabelingStore::register_judge(const std::string& judge) {
  std::lock_guard lock(mutex_);
  judges_.insert(judge);
}

bool LabelingStore::has_judge(const std::string& judge) const {
  std::lock_guard lock(mutex_);
  return judges_.count(judge) != 0;
}

std::optional<std::size_t> LabelingStore::item_index(const std::string& image_id) const {
  auto it = index_.find(image_id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t LabelingStore::occupied(const ImageVotes& v, const std::string& judge, std::int64_t t) const {
  std::size_t n = v.unperturbed.size();
  for (const auto& [other, expiry] : v.reservations)
    if (other != judge && expiry > t && !v.unperturbed.count(other)) ++n;
  return n;
}

std::vector<std::size_t> LabelingStore::order_for(const std::string& judge) const {
  std::vector<std::size_t> order(items_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 engine(fnv1a(judge) ^ options_.order_seed);
  std::shuffle(order.begin(), order.end(), engine);
  return order;
}

std::optional<LabelTask> LabelingStore::next_task(const std::string& judge) {
  std::lock_guard lock(mutex_);
  if (!judges_.count(judge)) throw LabelingRejected(LabelingFailure::unknown_judge, "unknown judge '" + judge + "'");
  const auto t = now();
  const auto order = order_for(judge);
  for (auto i : order) {
    const auto& v = votes_[i];
    auto it = v.unperturbed.find(judge);
    if (it != v.unperturbed.end() && it->second.first == kChoiceMatches && !v.perturbed.count(judge))
      return LabelTask{i, items_[i].image_id, items_[i].label_name, Stage::perturbed};
  }
  for (auto i : order) {
    auto& v = votes_[i];
    if (v.unperturbed.count(judge)) continue;
    if (occupied(v, judge, t) >= options_.panel_size) continue;
    v.reservations[judge] = t + options_.reservation_ttl.count();
    return LabelTask{i, items_[i].image_id, items_[i].label_name, Stage::unperturbed};
  }
  return std::nullopt;
}

VoteAck LabelingStore::submit_vote(VoteRecord vote) {
  std::lock_guard lock(mutex_);
  if (vote.timestamp_ms == 0) vote.timestamp_ms = now();
  return apply(vote, false);
}

VoteAck LabelingStore::apply(const VoteRecord& vote, bool replay) {
  if (!judges_.count(vote.judge))
    throw LabelingRejected(LabelingFailure::unknown_judge, "unknown judge '" + vote.judge + "'");
  auto idx = item_index(vote.image_id);
  if (!idx) throw LabelingRejected(LabelingFailure::unknown_image, "unknown image '" + vote.image_id + "'");
  if (vote.choice < 1 || vote.choice > 4)
    throw LabelingRejected(LabelingFailure::invalid_choice, "choice must be 1..4");
  auto& v = votes_[*idx];
  auto& stage_votes = vote.stage == Stage::unperturbed ? v.unperturbed : v.perturbed;

  if (auto it = stage_votes.find(vote.judge); it != stage_votes.end()) {
    if (it->second.first != vote.choice)
      throw LabelingRejected(LabelingFailure::duplicate_conflict, "judge already voted differently on this stage");
    return VoteAck{it->second.second, true};
  }

  if (vote.stage == Stage::unperturbed) {
    if (!replay) {
      auto res = v.reservations.find(vote.judge);
      if (res == v.reservations.end())
        throw LabelingRejected(LabelingFailure::not_served, "image was not served to this judge");
    }
    if (v.unperturbed.size() >= options_.panel_size)
      throw LabelingRejected(LabelingFailure::panel_full, "panel for this image is full");
  } else {
    auto first = v.unperturbed.find(vote.judge);
    if (first == v.unperturbed.end() || first->second.first != kChoiceMatches)
      throw LabelingRejected(LabelingFailure::stage_violation,
                             "perturbed-stage vote requires choice 1 on the unperturbed image");
  }

  const std::uint64_t seq = next_sequence_++;
  stage_votes.emplace(vote.judge, std::make_pair(vote.choice, seq));
  v.reservations.erase(vote.judge);
  ++vote_count_;
  if (!replay && log_.is_open()) {
    json j{{"judge", vote.judge},
           {"image_id", vote.image_id},
           {"stage", to_string(vote.stage)},
           {"choice", vote.choice},
           {"timestamp", vote.timestamp_ms},
           {"sequence", seq}};
    log_ << j.dump() << '\n';
    log_.flush();
  }
  return VoteAck{seq, false};
}

bool LabelingStore::complete_locked(std::size_t index) const {
  const auto& v = votes_[index];
  if (v.unperturbed.size() < options_.panel_size) return false;
  std::size_t keep = 0;
  for (const auto& [judge, c] : v.unperturbed)
    if (c.first == kChoiceMatches) ++keep;
  if (keep < majority(options_.panel_size)) return true;
  return v.perturbed.size() == keep;
}

Disposition LabelingStore::aggregate_locked(std::size_t index) const {
  const auto& v = votes_[index];
  Disposition d;
  d.image_id = items_[index].image_id;
  std::vector<int> first, second;
  for (const auto& [judge, c] : v.unperturbed) {
    first.push_back(c.first);
    ++d.unperturbed_tally[static_cast<std::size_t>(c.first - 1)];
  }
  for (const auto& [judge, c] : v.perturbed) {
    second.push_back(c.first);
    ++d.perturbed_tally[static_cast<std::size_t>(c.first - 1)];
  }
  d.outcome = decide_disposition(first, second, options_.panel_size);
  return d;
}

bool LabelingStore::is_complete(const std::string& image_id) const {
  std::lock_guard lock(mutex_);
  auto idx = item_index(image_id);
  if (!idx) throw LabelingRejected(LabelingFailure::unknown_image, "unknown image '" + image_id + "'");
  return complete_locked(*idx);
}

Disposition LabelingStore::aggregate(const std::string& image_id) const {
  std::lock_guard lock(mutex_);
  auto idx = item_index(image_id);
  if (!idx) throw LabelingRejected(LabelingFailure::unknown_image, "unknown image '" + image_id + "'");
  return aggregate_locked(*idx);
}

std::vector<Disposition> LabelingStore::dispositions() const {
  std::lock_guard lock(mutex_);
  std::vector<Disposition> out;
  for (std::size_t i = 0; i < items_.size(); ++i)
    if (complete_locked(i)) out.push_back(aggregate_locked(i));
  return out;
}

std::size_t LabelingStore::vote_count() const {
  std::lock_guard lock(mutex_);
  return vote_count_;
}

}  // namespace lprobe

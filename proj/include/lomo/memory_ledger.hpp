#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "lomo/error.hpp"

namespace lomo {

enum class MemoryCategory : std::uint8_t { Params = 0, Gradients, OptimStates, Activations };

inline constexpr std::size_t kNumMemoryCategories = 4;

inline constexpr std::array<MemoryCategory, kNumMemoryCategories> kAllMemoryCategories = {
    MemoryCategory::Params, MemoryCategory::Gradients, MemoryCategory::OptimStates,
    MemoryCategory::Activations};

inline std::string_view to_string(MemoryCategory c) {
  switch (c) {
    case MemoryCategory::Params: return "params";
    case MemoryCategory::Gradients: return "gradients";
    case MemoryCategory::OptimStates: return "optim_states";
    case MemoryCategory::Activations: return "activations";
  }
  return "unknown";
}

struct LedgerEvent {
  std::uint64_t ordinal;
  MemoryCategory category;
  std::int64_t delta;
};

// Immutable copy of the ledger counters.
struct LedgerSnapshot {
  std::array<std::int64_t, kNumMemoryCategories> current{};
  std::array<std::int64_t, kNumMemoryCategories> peak{};
  // peak[c] / sum of all category peaks, in percent.
  std::array<double, kNumMemoryCategories> peak_share_percent{};
  // High-water mark of the sum over categories at a single instant.
  std::int64_t total_peak = 0;

  std::int64_t current_of(MemoryCategory c) const { return current[static_cast<std::size_t>(c)]; }
  std::int64_t peak_of(MemoryCategory c) const { return peak[static_cast<std::size_t>(c)]; }
  double share_of(MemoryCategory c) const {
    return peak_share_percent[static_cast<std::size_t>(c)];
  }
};

// Per-category byte accounting. Counts logical tensor bytes only.
class MemoryLedger {
 public:
  explicit MemoryLedger(bool keep_event_log = false) : keep_log_(keep_event_log) {}

  void record(MemoryCategory category, std::int64_t delta_bytes) {
    const auto i = static_cast<std::size_t>(category);
    if (current_[i] + delta_bytes < 0) {
      throw AccountingError("memory ledger: " + std::string(to_string(category)) +
                            " balance would become negative (current " +
                            std::to_string(current_[i]) + ", delta " +
                            std::to_string(delta_bytes) + ")");
    }
    current_[i] += delta_bytes;
    total_current_ += delta_bytes;
    if (current_[i] > peak_[i]) {
      peak_[i] = current_[i];
    }
    if (total_current_ > total_peak_) {
      total_peak_ = total_current_;
    }
    if (delta_bytes > 0) {
      ++allocations_[i];
    } else if (delta_bytes < 0) {
      ++releases_[i];
    }
    if (keep_log_) {
      log_.push_back({next_ordinal_, category, delta_bytes});
    }
    ++next_ordinal_;
  }

  std::int64_t current(MemoryCategory c) const { return current_[static_cast<std::size_t>(c)]; }
  std::int64_t peak(MemoryCategory c) const { return peak_[static_cast<std::size_t>(c)]; }
  std::uint64_t allocations(MemoryCategory c) const {
    return allocations_[static_cast<std::size_t>(c)];
  }
  std::uint64_t releases(MemoryCategory c) const { return releases_[static_cast<std::size_t>(c)]; }
  const std::vector<LedgerEvent>& event_log() const { return log_; }

  // Resets peaks to the current balances, e.g. to measure a single step.
  void reset_peaks() {
    peak_ = current_;
    total_peak_ = total_current_;
  }

  LedgerSnapshot snapshot() const {
    LedgerSnapshot s;
    s.current = current_;
    s.peak = peak_;
    s.total_peak = total_peak_;
    std::int64_t denom = 0;
    for (auto p : peak_) denom += p;
    for (std::size_t i = 0; i < kNumMemoryCategories; ++i) {
      s.peak_share_percent[i] =
          denom > 0 ? 100.0 * static_cast<double>(peak_[i]) / static_cast<double>(denom) : 0.0;
    }
    return s;
  }

 private:
  bool keep_log_;
  std::array<std::int64_t, kNumMemoryCategories> current_{};
  std::array<std::int64_t, kNumMemoryCategories> peak_{};
  std::array<std::uint64_t, kNumMemoryCategories> allocations_{};
  std::array<std::uint64_t, kNumMemoryCategories> releases_{};
  std::int64_t total_current_ = 0;
  std::int64_t total_peak_ = 0;
  std::uint64_t next_ordinal_ = 0;
  std::vector<LedgerEvent> log_;
};

// RAII charge against a ledger. Copying charges the bytes again, moving
// transfers ownership of the charge.
class LedgerCharge {
 public:
  LedgerCharge() = default;
  LedgerCharge(MemoryLedger* ledger, MemoryCategory category, std::int64_t bytes)
      : ledger_(ledger), category_(category), bytes_(bytes) {
    if (ledger_ != nullptr) ledger_->record(category_, bytes_);
  }
  LedgerCharge(const LedgerCharge& other)
      : LedgerCharge(other.ledger_, other.category_, other.bytes_) {}
  LedgerCharge(LedgerCharge&& other) noexcept
      : ledger_(other.ledger_), category_(other.category_), bytes_(other.bytes_) {
    other.ledger_ = nullptr;
    other.bytes_ = 0;
  }
  LedgerCharge& operator=(const LedgerCharge& other) {
    if (this != &other) {
      LedgerCharge tmp(other);
      *this = std::move(tmp);
    }
    return *this;
  }
  LedgerCharge& operator=(LedgerCharge&& other) noexcept {
    if (this != &other) {
      release();
      ledger_ = other.ledger_;
      category_ = other.category_;
      bytes_ = other.bytes_;
      other.ledger_ = nullptr;
      other.bytes_ = 0;
    }
    return *this;
  }
  ~LedgerCharge() { release(); }

  // Changes the charged amount in place (e.g. after a precision change).
  void resize(std::int64_t bytes) {
    if (ledger_ != nullptr && bytes != bytes_) {
      ledger_->record(category_, bytes - bytes_);
    }
    bytes_ = bytes;
  }

  MemoryLedger* ledger() const { return ledger_; }
  MemoryCategory category() const { return category_; }
  std::int64_t bytes() const { return bytes_; }

 private:
  void release() noexcept {
    if (ledger_ != nullptr && bytes_ != 0) {
      // A charge only ever returns what it added, so this cannot underflow.
      ledger_->record(category_, -bytes_);
    }
    ledger_ = nullptr;
    bytes_ = 0;
  }

  MemoryLedger* ledger_ = nullptr;
  MemoryCategory category_ = MemoryCategory::Activations;
  std::int64_t bytes_ = 0;
};

}  // namespace lomo

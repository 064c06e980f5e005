#pragma once

// Per-epoch batch ordering across the detection, panoptic and caption streams.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vloss/schedule/stream.hpp"

namespace vloss {

enum class Strategy { stt, mix, pretrain_finetune };

std::string_view to_string(Strategy s);
Strategy parse_strategy(std::string_view name);

struct DatasetHandle {
  Stream stream = Stream::detection;
  Index num_batches = 0;
  Index batch_size = 1;
};

struct BatchTicket {
  Stream stream = Stream::detection;
  Index batch_index = 0;
  Index position = 0;

  bool operator==(const BatchTicket&) const = default;
};

struct EpochPlan {
  Strategy strategy = Strategy::mix;
  Index epoch = 0;
  std::uint64_t seed = 0;
  std::vector<BatchTicket> tickets;
  std::optional<Index> boundary;  // first cooldown position (stt only)

  Index size() const { return static_cast<Index>(tickets.size()); }
};

/// Options that only some strategies read.
struct PlanOptions {
  std::optional<Index> split_epoch;  // pretrain_finetune; defaults to total_epochs / 2
};

/// Builds one epoch's ordering.
///
/// stt: detection batches (warmup) then panoptic batches (cooldown), with the
/// caption batches split between the two in proportion to their dense counts
/// and spread at a uniform stride. mix: one uniform shuffle of everything.
/// pretrain_finetune: detection+caption before the split epoch, panoptic+caption
/// from it on. Shuffles depend on (seed, epoch).
EpochPlan build_epoch_plan(Strategy strategy, const std::vector<DatasetHandle>& handles, Index epoch,
                           Index total_epochs, std::uint64_t seed, const PlanOptions& opts = {});

/// Ticket at `cursor`, or nullopt once the epoch is exhausted.
std::optional<BatchTicket> next_batch(const EpochPlan& plan, Index cursor);

struct PlanSegment {
  std::string name;
  Index begin = 0, end = 0;
  std::array<Index, 3> counts{};  // indexed by Stream
};

struct PlanStats {
  Strategy strategy = Strategy::mix;
  Index epoch = 0;
  Index total = 0;
  std::optional<Index> boundary;
  std::vector<PlanSegment> segments;
  std::vector<Index> caption_positions;
};

PlanStats plan_stats(const EpochPlan& plan);
std::string plan_stats_json(const PlanStats& stats, int indent = 2);

}  // namespace vloss

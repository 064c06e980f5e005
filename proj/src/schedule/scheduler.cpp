#include "vloss/schedule/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <random>

namespace vloss {

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::stt: return "stt";
    case Strategy::mix: return "mix";
    case Strategy::pretrain_finetune: return "pretrain_finetune";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  if (name == "stt") return Strategy::stt;
  if (name == "mix") return Strategy::mix;
  if (name == "pretrain_finetune") return Strategy::pretrain_finetune;
  throw ValidationError("unknown strategy '" + std::string(name) + "' (expected stt, mix or pretrain_finetune)");
}

namespace {

using Tickets = std::vector<BatchTicket>;

Tickets stream_tickets(Stream s, Index n) {
  Tickets out(n);
  for (Index i = 0; i < n; ++i) out[i] = {s, i, 0};
  return out;
}

// Captions at a uniform stride among the dense tickets: caption k lands on
// floor((k + 0.5) * n / c) of the merged sequence.
Tickets interleave(const Tickets& dense, const Tickets& captions) {
  const Index c = static_cast<Index>(captions.size());
  const Index n = static_cast<Index>(dense.size()) + c;
  Tickets out;
  out.reserve(n);
  Index next_cap = 0, next_dense = 0;
  for (Index pos = 0; pos < n; ++pos) {
    const bool cap_here =
        next_cap < c && pos == static_cast<Index>(std::floor((next_cap + 0.5) * static_cast<double>(n) / c));
    out.push_back(cap_here ? captions[next_cap++] : dense[next_dense++]);
  }
  return out;
}

}  // namespace

EpochPlan build_epoch_plan(Strategy strategy, const std::vector<DatasetHandle>& handles, Index epoch,
                           Index total_epochs, std::uint64_t seed, const PlanOptions& opts) {
  if (total_epochs < 1) throw ValidationError("build_epoch_plan: total_epochs must be >= 1");
  if (epoch < 0 || epoch >= total_epochs) {
    throw ValidationError("build_epoch_plan: epoch " + std::to_string(epoch) + " outside [0, " +
                          std::to_string(total_epochs) + ")");
  }
  std::array<Index, 3> sizes{};
  std::array<bool, 3> seen{};
  for (const auto& h : handles) {
    const auto k = static_cast<std::size_t>(h.stream);
    if (seen[k]) throw ValidationError("build_epoch_plan: duplicate handle for stream " + std::string(to_string(h.stream)));
    if (h.num_batches < 0) throw ValidationError("build_epoch_plan: negative batch count");
    seen[k] = true;
    sizes[k] = h.num_batches;
  }
  const Index det = sizes[0], pan = sizes[1], cap = sizes[2];

  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(strategy)};
  std::mt19937_64 rng(seq);
  Tickets dets = stream_tickets(Stream::detection, det);
  Tickets pans = stream_tickets(Stream::panoptic, pan);
  Tickets caps = stream_tickets(Stream::caption, cap);
  std::shuffle(dets.begin(), dets.end(), rng);
  std::shuffle(pans.begin(), pans.end(), rng);
  std::shuffle(caps.begin(), caps.end(), rng);

  EpochPlan plan;
  plan.strategy = strategy;
  plan.epoch = epoch;
  plan.seed = seed;
  switch (strategy) {
    case Strategy::stt: {
      Index warm_caps = cap;
      if (det + pan > 0) {
        warm_caps = std::llround(static_cast<double>(cap) * det / static_cast<double>(det + pan));
        if (cap >= 2 && det > 0 && pan > 0) warm_caps = std::clamp<Index>(warm_caps, 1, cap - 1);
      }
      const Tickets warm_c(caps.begin(), caps.begin() + warm_caps), cool_c(caps.begin() + warm_caps, caps.end());
      plan.tickets = interleave(dets, warm_c);
      plan.boundary = plan.size();
      const Tickets cool = interleave(pans, cool_c);
      plan.tickets.insert(plan.tickets.end(), cool.begin(), cool.end());
      break;
    }
    case Strategy::mix: {
      plan.tickets = dets;
      plan.tickets.insert(plan.tickets.end(), pans.begin(), pans.end());
      plan.tickets.insert(plan.tickets.end(), caps.begin(), caps.end());
      std::shuffle(plan.tickets.begin(), plan.tickets.end(), rng);
      break;
    }
    case Strategy::pretrain_finetune: {
      const Index split = opts.split_epoch.value_or(total_epochs / 2);
      if (split < 0 || split > total_epochs) throw ValidationError("build_epoch_plan: split_epoch out of range");
      plan.tickets = interleave(epoch < split ? dets : pans, caps);
      break;
    }
  }
  for (Index i = 0; i < plan.size(); ++i) plan.tickets[i].position = i;
  return plan;
}

std::optional<BatchTicket> next_batch(const EpochPlan& plan, Index cursor) {
  if (cursor < 0) throw ValidationError("next_batch: negative cursor");
  if (cursor >= plan.size()) return std::nullopt;
  return plan.tickets[cursor];
}

PlanStats plan_stats(const EpochPlan& plan) {
  PlanStats st;
  st.strategy = plan.strategy;
  st.epoch = plan.epoch;
  st.total = plan.size();
  st.boundary = plan.boundary;
  auto segment = [&](std::string name, Index b, Index e) {
    PlanSegment seg{std::move(name), b, e, {}};
    for (Index i = b; i < e; ++i) ++seg.counts[static_cast<std::size_t>(plan.tickets[i].stream)];
    st.segments.push_back(seg);
  };
  if (plan.boundary) {
    segment("warmup", 0, *plan.boundary);
    segment("cooldown", *plan.boundary, plan.size());
  } else {
    segment("epoch", 0, plan.size());
  }
  for (const auto& t : plan.tickets)
    if (t.stream == Stream::caption) st.caption_positions.push_back(t.position);
  return st;
}

std::string plan_stats_json(const PlanStats& st, int indent) {
  nlohmann::ordered_json j;
  j["strategy"] = std::string(to_string(st.strategy));
  j["epoch"] = st.epoch;
  j["total"] = st.total;
  j["boundary"] = st.boundary ? nlohmann::ordered_json(*st.boundary) : nlohmann::ordered_json(nullptr);
  j["segments"] = nlohmann::ordered_json::array();
  for (const auto& s : st.segments) {
    nlohmann::ordered_json seg;
    seg["name"] = s.name;
    seg["begin"] = s.begin;
    seg["end"] = s.end;
    seg["counts"] = {{"detection", s.counts[0]}, {"panoptic", s.counts[1]}, {"caption", s.counts[2]}};
    j["segments"].push_back(seg);
  }
  j["caption_positions"] = st.caption_positions;
  return j.dump(indent);
}

}  // namespace vloss

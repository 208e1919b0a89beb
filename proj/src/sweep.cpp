#include "mtlforge/sweep.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

#include "mtlforge/error.hpp"

namespace mtlforge::sweep {

namespace {

bool ranks_before(const SweepRow& a, const SweepRow& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.name < b.name;
}

Combination canonical(Combination combo) {
  std::sort(combo.begin() + 1, combo.end());
  return combo;
}

}  // namespace

void SweepSpec::validate() const {
  if (target.empty()) throw ConfigError("sweep needs a target task");
  if (candidates.empty()) throw ConfigError("sweep needs at least one candidate task");
  std::set<std::string> distinct(candidates.begin(), candidates.end());
  if (distinct.size() != candidates.size()) throw ConfigError("sweep candidates must be distinct");
  if (distinct.count(target)) throw ConfigError("the target task cannot also be a candidate");
  if (beam == 0 || stages == 0) throw ConfigError("sweep beam and stages must be positive");
}

std::string combination_name(const Combination& combo) {
  std::string out;
  for (const auto& t : combo) out += (out.empty() ? "" : "+") + t;
  return out;
}

std::vector<Combination> next_stage(const std::vector<Combination>& parents, const std::vector<std::string>& candidates,
                                    std::vector<Combination>& seen) {
  std::vector<Combination> out;
  for (const auto& parent : parents) {
    for (const auto& c : candidates) {
      if (std::find(parent.begin(), parent.end(), c) != parent.end()) continue;
      Combination child = parent;
      child.push_back(c);
      child = canonical(std::move(child));
      if (std::find(seen.begin(), seen.end(), child) != seen.end()) continue;
      seen.push_back(child);
      out.push_back(std::move(child));
    }
  }
  return out;
}

SweepResult run_sweep(const SweepSpec& spec, const Evaluator& mtl, const Evaluator& finetune) {
  spec.validate();
  SweepResult result;
  std::vector<Combination> seen;
  std::vector<Combination> frontier = next_stage({{spec.target}}, spec.candidates, seen);
  std::vector<SweepRow> mtl_rows;
  for (std::size_t stage = 1; stage <= spec.stages && !frontier.empty(); ++stage) {
    std::vector<SweepRow> stage_rows;
    for (const auto& combo : frontier) {
      stage_rows.push_back({combination_name(combo), combo, stage, mtl(combo), false});
      ++result.mtl_runs;
    }
    std::sort(stage_rows.begin(), stage_rows.end(), ranks_before);
    std::vector<Combination> parents;
    for (std::size_t i = 0; i < std::min(spec.beam, stage_rows.size()); ++i) parents.push_back(stage_rows[i].combination);
    mtl_rows.insert(mtl_rows.end(), stage_rows.begin(), stage_rows.end());
    if (stage < spec.stages) frontier = next_stage(parents, spec.candidates, seen);
  }
  std::sort(mtl_rows.begin(), mtl_rows.end(), ranks_before);
  result.rows = mtl_rows;
  if (spec.finetune && finetune) {
    for (std::size_t i = 0; i < std::min(spec.ft_top, mtl_rows.size()); ++i) {
      SweepRow row = mtl_rows[i];
      row.name += kFinetuneSuffix;
      row.score = finetune(row.combination);
      row.finetuned = true;
      result.rows.push_back(std::move(row));
      ++result.ft_runs;
    }
    std::sort(result.rows.begin(), result.rows.end(), ranks_before);
  }
  return result;
}

std::string render_sweep(const SweepResult& result) {
  std::string out = "| Rank | Combination | Stage | Eval macro-F1 |\n|---:|---|---:|---:|\n";
  std::size_t rank = 0;
  for (const auto& row : result.rows) {
    char score[32];
    std::snprintf(score, sizeof score, "%.4f", row.score);
    out += "| " + std::to_string(++rank) + " | " + row.name + " | " + std::to_string(row.stage) + " | " + score + " |\n";
  }
  return out;
}

}  // namespace mtlforge::sweep

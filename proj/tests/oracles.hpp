#pragma once

// Slow, obviously-correct restatements used as references by the tests and
// the acceptance runner. Nothing here calls into the library.

#include <algorithm>
#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace oracle {

inline std::size_t lcs(const std::u32string& a, const std::u32string& b) {
  std::vector<std::vector<std::size_t>> t(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      t[i][j] = a[i - 1] == b[j - 1] ? t[i - 1][j - 1] + 1 : std::max(t[i - 1][j], t[i][j - 1]);
    }
  }
  return t[a.size()][b.size()];
}

inline double indel(const std::u32string& a, const std::u32string& b) {
  const double total = static_cast<double>(a.size() + b.size());
  if (total == 0) return 100.0;
  const double d = total - 2.0 * static_cast<double>(lcs(a, b));
  return 100.0 * (1.0 - d / total);
}

// Every substring of the longer string, every length.
inline double partial(const std::u32string& a, const std::u32string& b) {
  auto scan = [](const std::u32string& shorter, const std::u32string& longer) {
    double best = indel(shorter, std::u32string());
    for (std::size_t i = 0; i < longer.size(); ++i) {
      for (std::size_t len = 1; i + len <= longer.size(); ++len) {
        best = std::max(best, indel(shorter, longer.substr(i, len)));
      }
    }
    return best;
  };
  if (a.size() < b.size()) return scan(a, b);
  if (b.size() < a.size()) return scan(b, a);
  return std::max(scan(a, b), scan(b, a));
}

struct Prf {
  double p, r, f;
};

inline Prf prf(double tp, double fp, double fn) {
  double p = tp + fp > 0 ? tp / (tp + fp) : 0, r = tp + fn > 0 ? tp / (tp + fn) : 0;
  return {p, r, p + r > 0 ? 2 * p * r / (p + r) : 0};
}

struct Counts {
  std::size_t tp, fp, fn;
};

inline std::pair<Prf, Prf> micro_macro(const std::vector<Counts>& rows) {
  double tp = 0, fp = 0, fn = 0, mp = 0, mr = 0, mf = 0;
  for (const auto& c : rows) {
    tp += c.tp, fp += c.fp, fn += c.fn;
    auto m = prf(c.tp, c.fp, c.fn);
    mp += m.p, mr += m.r, mf += m.f;
  }
  const double n = static_cast<double>(rows.size());
  return {prf(tp, fp, fn), {mp / n, mr / n, mf / n}};
}

// Three cases on the scores strictly above the threshold: more than k, 1..k,
// none. Ranking is by score, then by the lower id.
inline std::vector<int> select(const std::vector<double>& f1, const std::vector<int>& ids,
                               double threshold, std::size_t k) {
  std::vector<std::pair<double, int>> ranked;
  for (std::size_t i = 0; i < f1.size(); ++i) ranked.emplace_back(f1[i], ids[i]);
  std::sort(ranked.begin(), ranked.end(), [](auto x, auto y) {
    return x.first != y.first ? x.first > y.first : x.second < y.second;
  });
  std::vector<int> above, all;
  for (auto [f, id] : ranked) {
    all.push_back(id);
    if (f > threshold) above.push_back(id);
  }
  if (above.size() > k) above.resize(k);
  if (!above.empty()) return above;
  if (all.size() > k) all.resize(k);
  return all;
}

}  // namespace oracle

namespace oracle {

// Greedy one-to-one matching restated as repeated "take the best free pair".
template <class Score>
Counts greedy_match(const std::vector<std::string>& preds, const std::vector<std::string>& golds,
                    double threshold, Score score) {
  std::vector<bool> pu(preds.size()), gu(golds.size());
  std::size_t tp = 0;
  for (;;) {
    double best = -1;
    std::size_t bp = 0, bg = 0;
    for (std::size_t g = 0; g < golds.size(); ++g) {
      for (std::size_t p = 0; p < preds.size(); ++p) {
        if (pu[p] || gu[g]) continue;
        const double s = score(preds[p], golds[g]);
        if (s >= threshold && s > best) best = s, bp = p, bg = g;
      }
    }
    if (best < 0) break;
    pu[bp] = gu[bg] = true;
    ++tp;
  }
  return {tp, preds.size() - tp, golds.size() - tp};
}

}  // namespace oracle

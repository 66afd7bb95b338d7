// Runs every acceptance criterion and prints one PASS/FAIL line each.
// Exit status counts failed criteria not listed with --known-failure, plus
// criteria that did not run (capped at 125).

#include <algorithm>
#include <iostream>
#include <set>
#include <string>

#include "aqcf/verify.hpp"

using namespace aqcf;

int main(int argc, char** argv) {
  bool skip_training = false;
  std::set<int> known;
  verify::OverfitOptions oo;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--skip-training")
      skip_training = true;
    else if (a == "--epochs" && i + 1 < argc)
      oo.epochs = std::stoi(argv[++i]);
    else if (a == "--known-failure" && i + 1 < argc)
      known.insert(std::stoi(argv[++i]));
    else {
      std::cerr << "usage: acceptance [--skip-training] [--epochs N] [--known-failure ID]...\n";
      return 2;
    }
  }
  oo.log = &std::cerr;

  std::vector<verify::CriterionResult> results;
  auto report = [&](const verify::CriterionResult& r) {
    verify::print_result(std::cout, r);
    std::cout.flush();
    results.push_back(r);
  };
  for (const auto& r : verify::oracle_suite()) report(r);

  if (!skip_training) {
    std::cerr << "training full and no-fusion on 8+8 phantoms for " << oo.epochs << " epochs\n";
    const verify::OverfitRun full = verify::run_overfit("full", oo);
    const verify::OverfitRun nof = verify::run_overfit("no-fusion", oo);
    report(verify::overfit_criterion(full, nof, oo));
    report(verify::gate_statistics_criterion(full, &std::cerr));
    report(verify::xai_criterion(full));
  }

  std::sort(results.begin(), results.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  int failed = 0, unexpected = 0;
  std::cout << "\nsummary\n";
  for (const auto& r : results) {
    verify::print_result(std::cout, r);
    failed += !r.passed;
    if (!r.passed && !known.count(r.id)) ++unexpected;
    if (r.passed && known.count(r.id)) std::cout << "note: criterion " << r.id << " listed as a known failure but passed\n";
  }
  const int expected_count = skip_training ? 11 : 14;
  const int missing = std::max(0, expected_count - static_cast<int>(results.size()));
  std::cout << results.size() - failed << "/" << results.size() << " criteria passed";
  if (failed > unexpected) std::cout << " (" << failed - unexpected << " known failure(s))";
  std::cout << '\n';
  return std::min(unexpected + missing, 125);
}

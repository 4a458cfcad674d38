#include <cstdio>
#include <cstring>
#include <string>

#include "criteria.hpp"

namespace {

int failures = 0;

void report(const char* name, const criteria::Outcome& o) {
  std::printf("%s %-26s %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
  std::fflush(stdout);
  failures += !o.pass;
}

}  // namespace

int main(int argc, char** argv) {
  const bool show_table = argc > 1 && std::strcmp(argv[1], "--table") == 0;

  report("conservation", criteria::conservation(25, 60, 101));
  report("gradient-fidelity", criteria::gradient_fidelity(120, 102));
  report("self-consistency", criteria::self_consistency(20, 103));

  sortsim::TrainConfig tc;
  tc.alpha = 0.5;
  const criteria::DeskScale desk = criteria::desk_scale(300, 100, tc, 600.0, 1);
  if (show_table) std::printf("%s", desk.table.c_str());
  criteria::Outcome ordering = desk.ordering;
  ordering.pass = ordering.pass && desk.runtime.pass;
  ordering.detail += "; " + desk.runtime.detail;
  report("desk-scale-ordering", ordering);
  report("no-reallocation-sign", desk.no_reallocation);

  report("stay-threshold", criteria::stay_threshold(10000, 104));
  report("preference-oracle", criteria::preference_oracle(200, 105));
  report("bootstrap-coverage", criteria::bootstrap_coverage(1000, 106));
  report("serializer-parser", criteria::serializer_parser());
  report("plant-and-recover", criteria::plant_and_recover(20, 7));

  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}

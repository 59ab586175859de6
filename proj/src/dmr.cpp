#include "safe/dmr.hpp"

#include <cmath>
#include <stdexcept>

namespace safe {

namespace {
double progress(int round, int total_rounds) {
  if (total_rounds < 1) throw std::invalid_argument("schedule: total rounds must be >= 1");
  if (round < 0 || round > total_rounds) throw std::invalid_argument("schedule: round out of range");
  return static_cast<double>(round) / total_rounds;
}
}  // namespace

double eps_plus(int round, int total_rounds) {
  return 1.0 - std::cos(progress(round, total_rounds) * M_PI / 2.0);
}

double eps_minus(int round, int total_rounds) {
  return std::cos(progress(round, total_rounds) * M_PI / 2.0);
}

}  // namespace safe

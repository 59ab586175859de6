#pragma once

namespace safe {

/// Rising rectification factor: 1 - cos((l/L) * pi/2).
double eps_plus(int round, int total_rounds);
/// Falling global-adoption factor: cos((l/L) * pi/2).
double eps_minus(int round, int total_rounds);

}  // namespace safe

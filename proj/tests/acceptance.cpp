// Standalone acceptance runner: one PASS/FAIL line per criterion, nonzero
// exit if any fails. Kept free of the unit-test framework so its output is
// exactly the nine lines.

#include <cstdio>
#include <iostream>

#include "uhfsynth/selftest.hpp"

int main() {
    uhfsynth::set_threads(1);
    uhfsynth::SelftestOptions opt;
    const int failures = uhfsynth::run_selftest(std::cout, opt);
    return failures == 0 ? 0 : 1;
}

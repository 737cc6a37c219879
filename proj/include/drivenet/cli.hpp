#pragma once

namespace drivenet {

// Entry point for the drivenet tool. Exit codes: 0 success, 1 on
// validation/contract failures, 2 on usage errors.
int run(int argc, const char* const* argv);

}  // namespace drivenet

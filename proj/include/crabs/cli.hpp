#pragma once

namespace crabs {

// Entry point of the `crabs` binary, separated from main() so tests can
// drive every verb in-process. argv follows main() conventions. Exit codes:
// 0 success, 1 violation or failed audit, 2 usage/config error, 3 numerical
// abort.
int cli_main(int argc, const char* const* argv);

}  // namespace crabs

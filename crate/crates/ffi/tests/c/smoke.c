#include <stdio.h>
#include "anoncount.h"

int main(void) {
    AncRun *run = NULL;
    if (anc_run(5, "random-connected", 7, ANC_MODE_BASIC, NULL, 0, true, &run) != ANC_STATUS_OK) {
        fprintf(stderr, "run failed: %s\n", anc_last_error());
        return 1;
    }
    uint64_t count = 0;
    AncMetrics m;
    if (anc_run_count(run, &count) != ANC_STATUS_OK || anc_run_metrics(run, &m) != ANC_STATUS_OK) {
        return 1;
    }
    printf("count %llu passed %d\n", (unsigned long long)count, (int)m.passed);
    anc_run_free(run);
    if (anc_run(0, "star", 0, ANC_MODE_BASIC, NULL, 0, false, &run) != ANC_STATUS_INVALID_ARGUMENT) {
        return 1;
    }
    return count == 5 && m.passed ? 0 : 1;
}

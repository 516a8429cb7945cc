#include <stdio.h>
#include <stdlib.h>

#include "prfcl.h"

#define CHECK(call)                                                        \
    do {                                                                   \
        enum PrfclStatus st_ = (call);                                     \
        if (st_ != PRFCL_STATUS_OK) {                                      \
            fprintf(stderr, "%s: %d %s\n", #call, st_, prfcl_last_error()); \
            return 1;                                                      \
        }                                                                  \
    } while (0)

static const char *CONFIG =
    "[stream]\nclasses = 6\ntasks = 2\ntrain_per_class = 6\ntest_per_class = 3\n"
    "[pretrain]\nclasses = 6\ntrain_per_class = 6\nepochs = 1\n"
    "[train]\nepochs = 1\n";

int main(void) {
    struct PrfclConfig *cfg = NULL;
    struct PrfclDataset *ds = NULL;
    struct PrfclBackbone *bb = NULL;
    struct PrfclRecord *rec = NULL;
    double acc = 0.0;
    size_t tasks = 0;

    if (prfcl_config_parse("[stream]\nbogus = 1\n", &cfg) != PRFCL_STATUS_CONFIG) {
        fprintf(stderr, "expected a config error\n");
        return 1;
    }
    CHECK(prfcl_config_parse(CONFIG, &cfg));
    CHECK(prfcl_config_set_seed(cfg, 3));
    CHECK(prfcl_dataset_generate(cfg, &ds));
    CHECK(prfcl_backbone_pretrain(cfg, &bb));
    CHECK(prfcl_run(cfg, ds, bb, &rec));
    CHECK(prfcl_record_num_tasks(rec, &tasks));
    CHECK(prfcl_record_final_accuracy(rec, &acc));
    printf("tasks %zu final %.4f\n", tasks, acc);

    prfcl_record_free(rec);
    prfcl_backbone_free(bb);
    prfcl_dataset_free(ds);
    prfcl_config_free(cfg);
    return tasks == 2 ? 0 : 1;
}

/*
 * Test harness for the generated inference engine.
 *
 * Usage: harness <input.bin>
 *
 * Reads one raw input tensor (exactly NN_INPUT_ELEMENTS elements of the
 * engine's element type), runs nn_forward, prints one logit per line and a
 * final "class=<k>" line.  Float logits print with 9 significant digits,
 * which round-trips every binary32 value, so text comparison is bitwise.
 * The harness adds no arithmetic of its own.
 *
 * Exit codes: 0 success, 2 usage or input-size error.
 */

#include <stdio.h>

#include "network.h"

static nn_elem_t input[NN_INPUT_ELEMENTS];
static nn_elem_t logits[NN_OUTPUT_CLASSES];

int main(int argc, char **argv)
{
    if (argc != 2) {
        fprintf(stderr, "usage: %s <input.bin>\n", argv[0]);
        return 2;
    }

    FILE *f = fopen(argv[1], "rb");
    if (f == NULL) {
        fprintf(stderr, "cannot open %s\n", argv[1]);
        return 2;
    }
    size_t got = fread(input, sizeof(nn_elem_t), NN_INPUT_ELEMENTS, f);
    int trailing = fgetc(f);
    fclose(f);
    if (got != NN_INPUT_ELEMENTS || trailing != EOF) {
        fprintf(stderr, "input must be exactly %lu bytes\n",
                (unsigned long)(NN_INPUT_ELEMENTS * sizeof(nn_elem_t)));
        return 2;
    }

    int best = nn_forward(input, logits);

    for (int k = 0; k < NN_OUTPUT_CLASSES; ++k) {
#if NN_ELEM_FLOAT
        printf("%.9g\n", (double)logits[k]);
#else
        printf("%d\n", (int)logits[k]);
#endif
    }
    printf("class=%d\n", best);
    return 0;
}
